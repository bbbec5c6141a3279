"""Run configuration shared by every command-line entry point.

A config is a JSON object. ``preset`` picks a base (``paper`` for the
four-encoder, d=4096 setting, ``toy`` for the two-encoder trainable setting)
and every other key overrides part of it. All randomness is derived from the
top-level ``seed``; sub-configs may not carry their own.
"""
import json
from dataclasses import asdict, dataclass, field

from .alignment import ProjectorConfig, plan_temporal_alignment, token_count
from .costmodel import LLAMA2_7B, SystemConfig
from .encoders import EncoderProfile, default_ensemble
from .errors import ConfigError, FormatError
from .fusion import FusionConfig

PRESETS = ("paper", "toy")

# bos, prompt and up to two answer words before the final target
MAX_TEXT_TOKENS = 4


def _toy_profiles():
    from .toytrain.train import TOY_PROFILES

    return [p.to_dict() for p in TOY_PROFILES]


def _preset(name):
    if name == "paper":
        return {
            "encoders": ["languagebind", "dinov2", "vivit", "siglip"],
            "t": 16,
            "projector": {"variant": "avg2d", "h": 8, "w": 8, "d": 4096},
            "fusion": {"strategy": "cross_attn"},
        }
    if name == "toy":
        return {
            "encoders": _toy_profiles(),
            "t": 4,
            "projector": {"variant": "avg2d", "h": 4, "w": 4, "d": 64, "resampler_heads": 4},
            "fusion": {"strategy": "cross_attn"},
        }
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


@dataclass
class TaskConfig:
    kind: str = "temporal_direction"
    n_train: int = 800
    n_test: int = 200
    frames: int = 8
    size: int = 32

    def __post_init__(self):
        from .toytrain.tasks import KINDS

        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; choose from {KINDS}")
        if min(self.n_train, self.n_test, self.frames) < 1:
            raise ConfigError("task sizes must be >= 1")
        if self.size < 4 or self.size % 4:
            raise ConfigError("task frame size must be a positive multiple of 4")


@dataclass
class CostConfig:
    llm_params: float = LLAMA2_7B["params"]
    llm_layers: int = LLAMA2_7B["layers"]
    llm_width: int = LLAMA2_7B["width"]
    text_tokens: int = 0
    attention_term: bool = False
    full_tokens: bool = False


@dataclass
class LatencyConfig:
    projector_ms: float = 1.0
    fusion_ms: float = 0.5
    llm_ms: float = 250.0
    dispatch_ms: float = 1.0
    lanes: int | None = None

    def __post_init__(self):
        if min(self.projector_ms, self.fusion_ms, self.llm_ms, self.dispatch_ms) < 0:
            raise ConfigError("latencies must be nonnegative")
        if self.lanes is not None and self.lanes < 1:
            raise ConfigError("lanes must be >= 1")


def _build(cls, d, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be an object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {what} fields {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{what}: {exc}") from None


def _profile(entry):
    if isinstance(entry, str):
        try:
            return default_ensemble([entry])[0]
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
    if isinstance(entry, dict):
        try:
            return EncoderProfile.from_dict(entry)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"encoder profile {entry.get('name', '?')!r}: {exc}") from None
    raise ConfigError(f"encoder entries are names or profile objects, got {entry!r}")


@dataclass
class RunConfig:
    profiles: list
    t: int
    projector: ProjectorConfig
    fusion: FusionConfig
    recipe: object
    llm: object
    task: TaskConfig = field(default_factory=TaskConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    seed: int = 0
    preset: str = "paper"
    out: str | None = None
    # the dict this config was resolved from, for re-resolving variants
    source: dict = field(default_factory=dict, repr=False, compare=False)

    KEYS = ("preset", "encoders", "t", "projector", "fusion", "recipe", "llm", "task", "cost", "latency", "seed", "out")

    @classmethod
    def from_dict(cls, d, preset=None):
        from .toytrain.model import ToyLLMConfig
        from .toytrain.train import RecipeConfig

        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        preset = d.get("preset", preset or "paper")
        base = _preset(preset)
        merged = {**base, **{k: v for k, v in d.items() if k != "preset"}}
        # section objects merge key by key onto the preset
        for key in ("projector", "fusion", "llm"):
            if key in d and key in base:
                if not isinstance(d[key], dict):
                    raise ConfigError(f"{key} must be an object")
                merged[key] = {**base[key], **d[key]}
        for key in ("projector", "fusion", "recipe"):
            if "seed" in merged.get(key, {}):
                raise ConfigError(f"{key}.seed is not allowed; set the top-level seed")
        seed = merged.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
        t = merged.get("t")
        if not isinstance(t, int) or isinstance(t, bool) or t < 1:
            raise ConfigError(f"t must be a positive integer, got {t!r}")
        encoders = merged.get("encoders")
        if not isinstance(encoders, list) or not encoders:
            raise ConfigError("encoders must be a nonempty list")
        profiles = [_profile(e) for e in encoders]
        names = [p.name for p in profiles]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate encoder names in {names}")
        try:
            projector = _build(ProjectorConfig, {**merged.get("projector", {}), "seed": seed}, "projector")
            fusion = _build(FusionConfig, {**merged.get("fusion", {}), "seed": seed}, "fusion")
            # the LM follows the projector width and fits the visual prefix unless told otherwise
            llm = dict(merged.get("llm", {}))
            llm.setdefault("d", projector.d)
            n_prefix = len(profiles) if fusion.strategy == "concat_seq" else 1
            llm.setdefault("context", max(80, n_prefix * token_count(projector, t) + MAX_TEXT_TOKENS))
            cfg = cls(
                profiles=profiles,
                t=t,
                projector=projector,
                fusion=fusion,
                recipe=RecipeConfig.from_dict({**merged.get("recipe", {}), "seed": seed}),
                llm=_build(ToyLLMConfig, llm, "llm"),
                task=_build(TaskConfig, merged.get("task", {}), "task"),
                cost=_build(CostConfig, merged.get("cost", {}), "cost"),
                latency=_build(LatencyConfig, merged.get("latency", {}), "latency"),
                seed=seed,
                preset=preset,
                out=merged.get("out"),
                source=dict(d, preset=preset),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, preset=None, seed=None, out=None):
        """Read ``path`` (or start from ``preset``) and apply command-line overrides."""
        d = {}
        if path is not None:
            try:
                with open(path) as fh:
                    d = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: invalid JSON: {exc}") from None
            if not isinstance(d, dict):
                raise ConfigError("config must be a JSON object")
        if preset is not None and "preset" not in d:
            d["preset"] = preset
        if seed is not None:
            d["seed"] = seed
        if out is not None:
            d["out"] = out
        return cls.from_dict(d)

    def validate(self):
        """Cross-reference checks; every command runs these before any compute."""
        plan = plan_temporal_alignment(self.profiles, self.t)
        self.projector.validate(plan.profiles)
        self.fusion.validate(len(self.profiles))
        if self.llm.d != self.projector.d:
            raise ConfigError(f"LLM width {self.llm.d} does not match projector width {self.projector.d}")
        ell = token_count(self.projector, self.t)
        prefix = ell * (len(self.profiles) if self.fusion.strategy == "concat_seq" else 1)
        if self.llm.context < prefix + MAX_TEXT_TOKENS:
            raise ConfigError(
                f"LLM context {self.llm.context} cannot hold {prefix} visual tokens plus {MAX_TEXT_TOKENS} text tokens"
            )
        return plan

    @property
    def plan(self):
        return plan_temporal_alignment(self.profiles, self.t)

    @property
    def names(self):
        return [p.name for p in self.profiles]

    def system(self):
        """Cost-model view of this run."""
        return SystemConfig(
            profiles=list(self.profiles),
            t=self.t,
            projector=self.projector,
            fusion=self.fusion,
            **asdict(self.cost),
        )

    def with_strategy(self, strategy):
        d = dict(self.source)
        d["fusion"] = {**d.get("fusion", {}), "strategy": strategy}
        return RunConfig.from_dict(d)

    def to_dict(self):
        strip = lambda d: {k: v for k, v in d.items() if k != "seed"}  # noqa: E731
        return {
            "preset": self.preset,
            "encoders": [p.to_dict() for p in self.profiles],
            "t": self.t,
            "projector": strip(asdict(self.projector)),
            "fusion": strip(asdict(self.fusion)),
            "recipe": strip(self.recipe.to_dict()),
            "llm": asdict(self.llm),
            "task": asdict(self.task),
            "cost": asdict(self.cost),
            "latency": asdict(self.latency),
            "seed": self.seed,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
