"""Wall-clock and operation-count scaling of linear vs softmax attention."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence

from .attention import attention_flops, feature_map_phi, linear_kernel, loglog_slope, softmax_kernel
from .errors import ValidationError
from .rng import generator
from .tensor import no_grad

KERNELS: Dict[str, Callable] = {"linear": linear_kernel, "softmax": softmax_kernel}
DEFAULT_NS = (1024, 2048, 4096, 8192, 16384)
UNRELIABLE_SPREAD = 0.5


@dataclass
class BenchSample:
    n: int
    flops: int
    seconds: List[float]
    median: float
    unreliable: bool


@dataclass
class BenchReport:
    kernel: str
    d: int
    repetitions: int
    samples: List[BenchSample]
    flop_slope: float
    flop_residual: float
    time_slope: float
    time_residual: float

    def to_dict(self) -> Dict:
        return asdict(self)

    def text(self) -> str:
        rows = [f"kernel {self.kernel}  d={self.d}  repetitions={self.repetitions}",
                f"{'N':>7}  {'flops':>16}  {'median s':>12}  {'spread':>7}  note"]
        for s in self.samples:
            spread = statistics.pstdev(s.seconds) / s.median if s.median > 0 else 0.0
            rows.append(f"{s.n:>7d}  {s.flops:>16d}  {s.median:>12.6f}  {spread:>7.3f}  "
                        f"{'UNRELIABLE' if s.unreliable else ''}".rstrip())
        rows.append(f"flop slope {self.flop_slope:.4f} (residual {self.flop_residual:.2e})")
        rows.append(f"time slope {self.time_slope:.4f} (residual {self.time_residual:.2e})")
        return "\n".join(rows)


def _inputs(n: int, d: int, seed: int):
    rng = generator(seed)
    q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
    with no_grad():
        q, k = feature_map_phi(q).data, feature_map_phi(k).data
    return q, k, v


def run_kernel(kernel: str, ns: Sequence[int], d: int = 64, repetitions: int = 5, seed: int = 0) -> BenchReport:
    if kernel not in KERNELS:
        raise ValidationError(f"unknown kernel {kernel!r}; choose from {sorted(KERNELS)}")
    ns = [int(n) for n in ns]
    if len(ns) < 5:
        raise ValidationError(f"need at least 5 sequence lengths for a slope fit, got {len(ns)}")
    if any(b <= a for a, b in zip(ns, ns[1:])) or ns[0] < 1:
        raise ValidationError(f"sequence lengths must be positive and strictly increasing, got {ns}")
    if repetitions < 5:
        raise ValidationError(f"need at least 5 repetitions, got {repetitions}")
    fn = KERNELS[kernel]
    samples = []
    for n in ns:
        q, k, v = _inputs(n, d, seed)
        fn(q, k, v)  # warm-up
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn(q, k, v)
            times.append(time.perf_counter() - t0)
        med = statistics.median(times)
        unreliable = statistics.pstdev(times) > UNRELIABLE_SPREAD * med
        samples.append(BenchSample(n, attention_flops(kernel, n, d, d), times, med, unreliable))
    fs, fr = loglog_slope(ns, [s.flops for s in samples])
    ts, tr = loglog_slope(ns, [s.median for s in samples])
    return BenchReport(kernel, d, repetitions, samples, fs, fr, ts, tr)


def write_report(report: BenchReport, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"bench_{report.kernel}.json"
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return path
