"""Training recipes, the training loop, gradient checks and checkpoints."""
import copy
import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .. import featio
from ..alignment import ProjectorConfig
from ..encoders import EncoderProfile, encode, make_mock_encoder, uniform_sample_frames
from ..errors import ConfigError, FormatError, TrainingError
from ..fusion import FusionConfig
from ..numerics import finite_diff_grad, relative_error
from .model import ToyLLMConfig, ToyPipeline, build_pipeline
from .tasks import TOK, make_synth_task

ALL = ("projector", "fusion", "llm")
CONNECTOR = ("projector", "fusion")

# stage name -> parameter groups that receive updates
RECIPES = {
    "frozen": (("stage2", CONNECTOR),),
    "full": (("stage1", ALL), ("stage2", ALL)),
    "two_stage_frozen_llm": (("stage1", CONNECTOR), ("stage2", ALL)),
    "mixed_single_stage": (("mixed", ALL),),
}
# learning rates used at 7B scale; toy runs use TOY_LR
PAPER_LR = {"stage1": 1e-4, "stage2": 2e-5, "mixed": 2e-5}
TOY_LR = {"stage1": 2e-3, "stage2": 1e-3, "mixed": 1e-3}
# the fusion query is a single d-vector; a larger step lets it move on the
# same time scale as the projectors and LM
TOY_GROUP_LR_SCALE = {"fusion": 10.0}


@dataclass
class RecipeConfig:
    recipe: str = "frozen"
    lr: dict = field(default_factory=lambda: dict(TOY_LR))
    steps: dict = field(default_factory=lambda: {"stage1": 150, "stage2": 300, "mixed": 300})
    batch_size: int = 32
    warmup_ratio: float = 0.03
    schedule: str = "cosine"
    weight_decay: float = 0.0
    # per-group multipliers on the stage learning rate
    group_lr_scale: dict = field(default_factory=lambda: dict(TOY_GROUP_LR_SCALE))
    seed: int = 0

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {self.recipe!r}; choose from {sorted(RECIPES)}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        for name, _ in RECIPES[self.recipe]:
            if name not in self.lr or name not in self.steps:
                raise ConfigError(f"recipe {self.recipe!r} needs lr and steps for stage {name!r}")
        bad = set(self.group_lr_scale) - set(ALL)
        if bad:
            raise ConfigError(f"unknown parameter groups {sorted(bad)}")

    def stages(self):
        return [(name, groups, self.lr[name], self.steps[name]) for name, groups in RECIPES[self.recipe]]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown recipe fields {sorted(unknown)}")
        base = cls()
        d = dict(d)
        d["lr"] = {**base.lr, **d.get("lr", {})}
        d["steps"] = {**base.steps, **d.get("steps", {})}
        return cls(**d)


def lr_factor(step, total, warmup_ratio, schedule):
    warmup = math.ceil(warmup_ratio * total)
    if step < warmup:
        return (step + 1) / warmup
    if schedule == "constant":
        return 1.0
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- data


def encode_task(task, encoders):
    """Encoder features for every video: list (per encoder) of (n, t, h, w, d) arrays."""
    out = []
    for e in encoders:
        n_frames = e.profile.input_frames
        out.append(np.stack([encode(e, uniform_sample_frames(v, n_frames)) for v in task.videos]))
    return out


def text_batch(task, idx, stage, rng=None):
    """Input token ids and answer targets for one batch.

    Sequence is ``<bos> prompt a_1 .. a_k``; the LM input drops ``a_k`` and the
    targets are the answer tokens predicted from ``prompt .. a_{k-1}``.
    """
    answers = task.answers()[idx]
    if stage == "stage1":
        prompts = np.full(len(idx), TOK["caption"])
    elif stage == "mixed":
        rng = rng or np.random.default_rng(0)
        prompts = np.where(rng.random(len(idx)) < 0.5, TOK["caption"], task.prompt())
    else:
        prompts = np.full(len(idx), task.prompt())
    seq = np.concatenate([np.full((len(idx), 1), TOK["<bos>"]), prompts[:, None], answers], axis=1)
    return torch.as_tensor(seq[:, :-1]), torch.as_tensor(answers)


def answer_logits(logits, n_answer):
    """Logits at the positions that predict the answer tokens."""
    return logits[:, -n_answer:]


def answer_loss(model, feats, tokens, answers):
    logits, w = model(feats, tokens)
    a = answer_logits(logits, answers.shape[1])
    return F.cross_entropy(a.reshape(-1, a.shape[-1]), answers.reshape(-1)), a, w


# ---------------------------------------------------------------- training


def set_trainable(model, groups):
    for g in ToyPipeline.GROUPS:
        for p in model.group(g).parameters():
            p.requires_grad_(g in groups)


def _threads():
    n = os.environ.get("MERV_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def train(model, task, recipe, features, log_every=1):
    """Run every stage of ``recipe``; returns a list of per-step metric dicts."""
    _threads()
    torch.manual_seed(recipe.seed)
    rng = np.random.default_rng([recipe.seed, 7])
    feats = [torch.as_tensor(f) for f in features]
    n = len(task)
    history = []
    step_global = 0
    for stage, groups, lr, steps in recipe.stages():
        set_trainable(model, groups)
        param_groups = []
        for g in groups:
            ps = [p for p in model.group(g).parameters() if p.requires_grad]
            if ps:
                param_groups.append({"params": ps, "lr": lr * recipe.group_lr_scale.get(g, 1.0)})
        opt = torch.optim.AdamW(param_groups, lr=lr, weight_decay=recipe.weight_decay) if param_groups else None
        sched = (
            torch.optim.lr_scheduler.LambdaLR(
                opt, lambda s, steps=steps: lr_factor(s, steps, recipe.warmup_ratio, recipe.schedule)
            )
            if opt
            else None
        )
        model.train()
        for step in range(steps):
            idx = rng.choice(n, size=min(recipe.batch_size, n), replace=False)
            tokens, answers = text_batch(task, idx, stage, rng)
            batch = [f[idx] for f in feats]
            loss, a, w = answer_loss(model, batch, tokens, answers)
            if not torch.isfinite(loss):
                raise TrainingError(step_global, f"non-finite loss in {stage}")
            if opt is not None:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                sched.step()
            if step_global % log_every == 0:
                row = {
                    "stage": stage,
                    "step": step_global,
                    "loss": float(loss.detach()),
                    "accuracy": float((a.argmax(-1) == answers).all(dim=1).float().mean()),
                }
                if w is not None:
                    for name, m in zip(model.names, w.detach().mean(dim=0).tolist()):
                        row[f"w_{name}"] = m
                history.append(row)
            step_global += 1
    set_trainable(model, ALL)
    return history


@torch.no_grad()
def evaluate(model, task, features, stage="stage2"):
    """Held-out accuracy (all answer tokens right) and per-video encoder weights."""
    model.eval()
    idx = np.arange(len(task))
    tokens, answers = text_batch(task, idx, stage)
    _, a, w = answer_loss(model, [torch.as_tensor(f) for f in features], tokens, answers)
    acc = float((a.argmax(-1) == answers).all(dim=1).float().mean())
    weights = None if w is None else w.numpy().astype(np.float64)
    return {
        "accuracy": acc,
        "weights": weights,
        "mean_weights": None if weights is None else weights.mean(axis=0),
    }


def history_csv(history, names):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    cols = [f"w_{n}" for n in names]
    wr.writerow(["step", "stage", "loss", "accuracy", *cols])
    for r in history:
        wr.writerow(
            [r["step"], r["stage"], f"{r['loss']:.8f}", f"{r['accuracy']:.6f}",
             *(f"{r[c]:.8f}" if c in r else "" for c in cols)]
        )
    return buf.getvalue()


# ---------------------------------------------------------------- gradients


def analytic_grads(model, feats, tokens, answers, groups=ALL):
    """Autograd gradients of the answer loss; frozen parameters report zeros."""
    set_trainable(model, groups)
    model.zero_grad(set_to_none=True)
    loss, _, _ = answer_loss(model, feats, tokens, answers)
    if loss.requires_grad:
        loss.backward()
    out = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    set_trainable(model, ALL)
    return out


def grad_check(model, feats, tokens, answers, names, coords=3, eps=1e-5, seed=0):
    """Max relative error between autograd and central differences, per parameter.

    Runs on a float64 copy of ``model``; ``coords`` random flat indices are
    checked per parameter (``None`` checks every entry).
    """
    m = copy.deepcopy(model).double()
    f64 = [torch.as_tensor(f).double() for f in feats]
    grads = analytic_grads(m, f64, tokens, answers)
    params = dict(m.named_parameters())
    rng = np.random.default_rng(seed)
    errors = {}
    for name in names:
        p = params[name]
        base = p.detach().numpy().copy()
        picks = None if coords is None else rng.choice(base.size, size=min(coords, base.size), replace=False)

        def loss_at(arr, p=p):
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr))
                return float(answer_loss(m, f64, tokens, answers)[0])

        numeric = finite_diff_grad(loss_at, base, eps=eps, coords=picks)
        with torch.no_grad():
            p.copy_(torch.from_numpy(base))
        a = grads[name].numpy().reshape(-1)
        num = numeric.reshape(-1)
        sel = np.arange(a.size) if picks is None else picks
        errors[name] = relative_error(a[sel], num[sel])
    return errors


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model, path, meta=None):
    """Write each parameter as a feature file plus a ``manifest.json`` index."""
    os.makedirs(path, exist_ok=True)
    tensors = {}
    for i, (name, p) in enumerate(sorted(model.state_dict().items())):
        if p is None or p.ndim == 0:
            continue
        fname = f"t{i:04d}.mrvf"
        featio.write_feature(os.path.join(path, fname), p.detach().cpu().numpy())
        tensors[name] = fname
    manifest = {
        "format": "merv-checkpoint-1",
        "profiles": [p.to_dict() for p in model.profiles],
        "projector": asdict(model.projector.config),
        "fusion": asdict(model.fusion.config),
        "llm": model.llm.cfg.to_dict(),
        "tensors": tensors,
        "meta": meta or {},
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Rebuild a :class:`ToyPipeline` from a checkpoint directory."""
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint manifest: {exc}") from None
    if manifest.get("format") != "merv-checkpoint-1":
        raise FormatError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    profiles = [EncoderProfile.from_dict(d) for d in manifest["profiles"]]
    model = build_pipeline(
        profiles,
        ProjectorConfig.from_dict(manifest["projector"]),
        FusionConfig.from_dict(manifest["fusion"]),
        ToyLLMConfig(**manifest["llm"]),
    )
    state = model.state_dict()
    for name, fname in manifest["tensors"].items():
        arr = featio.read_feature(os.path.join(path, fname))
        if name not in state or tuple(state[name].shape) != arr.shape:
            raise FormatError(f"{path}: tensor {name!r} does not fit the model")
        state[name] = torch.from_numpy(arr)
    model.load_state_dict(state)
    return model, manifest


# ---------------------------------------------------------------- experiments

TOY_PROFILES = (
    EncoderProfile("motion", 8, 4, 8, 8, 32, kind="temporal"),
    EncoderProfile("appearance", 4, 4, 8, 8, 32, kind="spatial"),
)


def toy_setup(seed=0, projector_variant="avg2d", strategy="cross_attn", profiles=TOY_PROFILES, d=64):
    projector_cfg = ProjectorConfig(variant=projector_variant, h=4, w=4, d=d, seed=seed, resampler_heads=4)
    fusion_cfg = FusionConfig(strategy=strategy, seed=seed)
    llm_cfg = ToyLLMConfig(d=d)
    model = build_pipeline(profiles, projector_cfg, fusion_cfg, llm_cfg, seed=seed)
    encoders = [make_mock_encoder(p, seed) for p in profiles]
    return model, encoders


def run_specialization(kind, seed, n_train=800, n_test=200, recipe=None):
    """Train the toy pipeline on one synthetic task and report held-out metrics."""
    recipe = recipe or RecipeConfig(recipe="mixed_single_stage", seed=seed)
    model, encoders = toy_setup(seed)
    train_task = make_synth_task(kind, n_train, seed)
    test_task = make_synth_task(kind, n_test, seed + 10_000)
    history = train(model, train_task, recipe, encode_task(train_task, encoders))
    result = evaluate(model, test_task, encode_task(test_task, encoders))
    result["names"] = model.names
    result["history"] = history
    result["model"] = model
    return result
