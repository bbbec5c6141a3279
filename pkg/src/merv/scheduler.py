"""Discrete-event model of one training step with serial or parallel encoding.

Each encoder runs an encode task followed by its projector task. Under the
serial policy every chain runs on one lane back to back. Under the parallel
policy chains are dispatched in profile order to the earliest free lane, and
a ``dispatch`` task adds ``epsilon`` per encoder beyond the first before the
fusion stage. Fusion and the language model run after every chain is done.
"""
import csv
import heapq
import io
import json
from dataclasses import dataclass, field


@dataclass
class LatencyProfile:
    encoders: dict  # name -> encode latency in ms, in dispatch order
    projector_ms: float = 0.0
    fusion_ms: float = 0.0
    llm_ms: float = 0.0
    dispatch_ms: float = 0.0

    def __post_init__(self):
        values = [*self.encoders.values(), self.projector_ms, self.fusion_ms, self.llm_ms, self.dispatch_ms]
        if any(v < 0 for v in values):
            raise ValueError("latencies must be nonnegative")

    def subset(self, names):
        return LatencyProfile(
            {n: self.encoders[n] for n in names},
            self.projector_ms, self.fusion_ms, self.llm_ms, self.dispatch_ms,
        )

    @classmethod
    def from_csv(cls, text):
        """Rows of ``stage,name,latency_ms``; stage is encoder|projector|fusion|llm|dispatch."""
        rows = list(csv.reader(io.StringIO(text)))
        first = 1
        if rows and rows[0] and rows[0][-1].strip() == "latency_ms":
            rows, first = rows[1:], 2
        encoders, scalars = {}, {}
        for i, row in enumerate(rows, start=first):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 3:
                raise ValueError(f"line {i}: expected stage,name,latency_ms")
            stage, name, value = (c.strip() for c in row)
            ms = float(value)
            if stage == "encoder":
                if name in encoders:
                    raise ValueError(f"line {i}: duplicate encoder {name!r}")
                encoders[name] = ms
            elif stage in ("projector", "fusion", "llm", "dispatch"):
                scalars[f"{stage}_ms"] = ms
            else:
                raise ValueError(f"line {i}: unknown stage {stage!r}")
        return cls(encoders, **scalars)


@dataclass
class Task:
    name: str
    lane: int
    start: float
    end: float
    after: tuple = ()


@dataclass
class ScheduleTrace:
    policy: str
    lanes: int
    tasks: list = field(default_factory=list)

    @property
    def makespan(self):
        return max((t.end for t in self.tasks), default=0.0)

    def task(self, name):
        return next(t for t in self.tasks if t.name == name)

    def phase_end(self, prefix):
        return max((t.end for t in self.tasks if t.name.startswith(prefix)), default=0.0)

    def to_dict(self):
        return {
            "policy": self.policy,
            "lanes": self.lanes,
            "makespan": self.makespan,
            "tasks": [
                {"name": t.name, "lane": t.lane, "start": t.start, "end": t.end, "after": list(t.after)}
                for t in self.tasks
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def gantt(self, width=60):
        span = self.makespan or 1.0
        label = max((len(t.name) for t in self.tasks), default=4)
        lines = [f"policy={self.policy} lanes={self.lanes} makespan={self.makespan:.3f} ms"]
        for t in self.tasks:
            a = int(round(t.start / span * width))
            b = max(a + 1, int(round(t.end / span * width))) if t.end > t.start else a
            bar = " " * a + "#" * (b - a)
            lines.append(f"{t.name:<{label}} L{t.lane} |{bar:<{width}}| {t.start:9.3f} {t.end:9.3f}")
        return "\n".join(lines) + "\n"


def simulate_step(latency, policy="parallel", lanes=None):
    """Simulate one step; ``lanes`` defaults to one per encoder for the parallel policy."""
    if policy not in ("serial", "parallel"):
        raise ValueError(f"unknown policy {policy!r}")
    names = list(latency.encoders)
    if policy == "serial":
        lanes = 1
    elif lanes is None:
        lanes = max(1, len(names))
    if lanes < 1:
        raise ValueError("lanes must be >= 1")

    trace = ScheduleTrace(policy, lanes)
    # event queue of (free_time, lane); ties go to the lower lane index
    free = [(0.0, lane) for lane in range(lanes)]
    heapq.heapify(free)
    chain_ends = []
    for name in names:
        start, lane = heapq.heappop(free)
        enc_end = start + latency.encoders[name]
        trace.tasks.append(Task(f"encode:{name}", lane, start, enc_end))
        proj_end = enc_end + latency.projector_ms
        trace.tasks.append(Task(f"project:{name}", lane, enc_end, proj_end, (f"encode:{name}",)))
        chain_ends.append(f"project:{name}")
        heapq.heappush(free, (proj_end, lane))
    ready = max((t.end for t in trace.tasks), default=0.0)
    deps = tuple(sorted(chain_ends))
    if policy == "parallel" and len(names) > 1:
        overhead = (len(names) - 1) * latency.dispatch_ms
        trace.tasks.append(Task("dispatch", 0, ready, ready + overhead, deps))
        ready += overhead
        deps = ("dispatch",)
    trace.tasks.append(Task("fuse", 0, ready, ready + latency.fusion_ms, deps))
    ready += latency.fusion_ms
    trace.tasks.append(Task("llm", 0, ready, ready + latency.llm_ms, ("fuse",)))
    trace.tasks.sort(key=lambda t: (t.start, t.name))
    return trace


def encoder_phase(trace):
    """Time at which fusion may start (encoders, projectors and dispatch done)."""
    return trace.task("fuse").start


def sweep_encoders(latency, order, policy="parallel", lanes=None):
    """Makespans for growing prefixes of ``order``.

    Each row also carries the slowest single-encoder step in the prefix and
    the bound ``max single chain + N*epsilon + downstream``.
    """
    downstream = latency.fusion_ms + latency.llm_ms
    rows = []
    for k in range(1, len(order) + 1):
        prefix = list(order[:k])
        sub = latency.subset(prefix)
        span = simulate_step(sub, policy, lanes).makespan
        singles = [simulate_step(latency.subset([n]), policy, lanes).makespan for n in prefix]
        slowest_chain = max(sub.encoders[n] for n in prefix) + latency.projector_ms
        rows.append(
            {
                "encoders": prefix,
                "makespan": span,
                "slowest_single": max(singles),
                "bound": slowest_chain + k * latency.dispatch_ms + downstream,
            }
        )
    return rows


def sweep_csv(rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["n_encoders", "last_added", "makespan_ms", "slowest_single_ms", "bound_ms"])
    for r in rows:
        wr.writerow([len(r["encoders"]), r["encoders"][-1], f"{r['makespan']:.6f}", f"{r['slowest_single']:.6f}", f"{r['bound']:.6f}"])
    return buf.getvalue()


def default_latency(profiles, projector_ms=1.0, fusion_ms=0.5, llm_ms=250.0, dispatch_ms=1.0):
    """Latency profile built from the encoder profiles' ``latency_ms`` fields."""
    return LatencyProfile(
        {p.name: p.latency_ms for p in profiles}, projector_ms, fusion_ms, llm_ms, dispatch_ms
    )
