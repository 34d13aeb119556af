"""Runtime correctness suites behind the `verify` subcommand.

Each suite re-derives a module invariant with an independent method at
run time: counting against a Pascal recurrence, index tables against
direct products, the unique-term path against the dense oracle, and
every differentiable layer against central finite differences. The
fault-injection hook exists so the wiring itself is testable: a corrupted
gather table must turn the reconstruction invariant red.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .autograd import Var, softmax_cross_entropy, volterra_conv
from .dense import embed_unique_weights, tvc_forward, tvc_grad_input
from .geometry import square_geometry
from .gradcheck import grad_check, pack, tape_function
from .hla import HlaConfig, HlaParams, hla_forward
from .positions import (
    IndexTables,
    PcmVariant,
    ProgressiveComputationMatrices,
    count_terms,
    index_tables,
)
from .unique import (
    build_terms_progressive,
    evc_forward,
    evc_grad_input,
    init_volterra_layer,
    random_unique_kernel,
)

REPORT_COLUMNS = ("suite", "cases", "failures", "detail")


@dataclass
class SuiteResult:
    suite: str
    cases: int = 0
    failures: list[str] = field(default_factory=list)
    detail: str = ""

    def check(self, ok: bool, message: str) -> None:
        self.cases += 1
        if not ok:
            self.failures.append(f"{self.suite}: {message}")


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / denom)


def suite_counting(max_n: int = 12, max_r: int = 6) -> SuiteResult:
    """count_terms against a Pascal-triangle recurrence plus the
    parameter-count identity."""
    res = SuiteResult("counting")
    table = np.zeros((max_n + 1, max_r + 1), dtype=object)
    table[:, 0] = 1
    table[0, 1:] = 0
    for n in range(1, max_n + 1):
        for r in range(1, max_r + 1):
            table[n, r] = table[n - 1, r] + table[n, r - 1]
    for n in range(1, max_n + 1):
        for r in range(1, max_r + 1):
            got = count_terms(n, r)
            res.check(got == table[n, r],
                      f"count_terms({n},{r}) = {got}, recurrence gives "
                      f"{table[n, r]}")
            total = 1 + sum(count_terms(n, j) for j in range(1, r + 1))
            want = math.comb(n + r, r)
            res.check(total == want,
                      f"1 + sum counts for n={n}, r={r} = {total}, "
                      f"binomial gives {want}")
    return res


def corrupt_pcm_tables(tables: IndexTables) -> IndexTables:
    """A copy of the tables with one gather entry of the top order bent to
    a different input position (test hook for the verify wiring)."""
    pcm = tables.pcm(tables.order)
    v0 = pcm.variants[0]
    bad_pos = v0.input_pos.copy()
    bad_pos[0] = (bad_pos[0] + 1) % tables.n
    bad = PcmVariant(input_pos=bad_pos, prev_row=v0.prev_row.copy(),
                     group_perm=v0.group_perm.copy(),
                     group_starts=v0.group_starts.copy())
    new_pcm = ProgressiveComputationMatrices(
        order=pcm.order, n=pcm.n, variants=(bad,) + pcm.variants[1:])
    return IndexTables(n=tables.n, order=tables.order, fpms=tables.fpms,
                       pcms=tables.pcms[:-1] + (new_pcm,))


def suite_index_soundness(fault: str | None = None,
                          seed: int = 0) -> SuiteResult:
    """Position-matrix set equality and the pcm-reconstruction invariant:
    every gather variant must rebuild the direct FPM-row products."""
    res = SuiteResult("index-soundness")
    rng = np.random.default_rng(seed)
    for n, max_r in ((2, 4), (3, 4), (5, 3), (8, 2)):
        tables = index_tables(n, max_r)
        if fault == "corrupt-pcm":
            tables = corrupt_pcm_tables(tables)
        for j in range(1, max_r + 1):
            rows = tables.fpm(j).rows
            got = {tuple(r) for r in rows.tolist()}
            want = set(combinations_with_replacement(range(n), j))
            res.check(got == want and len(rows) == len(want),
                      f"fpm set mismatch at n={n}, j={j}: "
                      f"{len(got)} distinct rows vs {len(want)} expected")
        x = rng.uniform(0.5, 1.5, size=n)
        canonical = build_terms_progressive(x, tables).vectors
        for j in range(2, max_r + 1):
            direct = np.prod(x[tables.fpm(j).rows], axis=1)
            for t, v in enumerate(tables.pcm(j).variants):
                rebuilt = x[v.input_pos] * canonical[j - 2][v.prev_row]
                err = _rel(rebuilt, direct)
                res.check(
                    err <= 1e-12,
                    f"pcm-reconstruction invariant violated at n={n}, "
                    f"order {j}, variant {t}: max rel err {err:.3e} vs "
                    f"expected <= 1e-12",
                )
    return res


def suite_oracle_equivalence(seed: int = 0) -> SuiteResult:
    """Unique-term forward/backward against the dense path."""
    res = SuiteResult("oracle-equivalence")
    rng = np.random.default_rng(seed)
    max_fwd = 0.0
    max_grad = 0.0
    for n in (2, 4, 6):
        for r in (1, 2, 3):
            tables = index_tables(n, r)
            fpms = [tables.fpm(j) for j in range(1, r + 1)]
            for _ in range(5):
                uk = random_unique_kernel(n, r, rng)
                dense = embed_unique_weights(uk, fpms)
                x = rng.uniform(-1, 1, size=n)
                got = evc_forward(x, uk, tables)
                want = tvc_forward(x, dense)
                err = _rel(got, want)
                max_fwd = max(max_fwd, err)
                res.check(err <= 1e-12,
                          f"forward n={n}, r={r}: rel err {err:.3e} vs "
                          f"dense oracle (expected <= 1e-12)")
                up = float(rng.uniform(-1, 1))
                cache = build_terms_progressive(x, tables)
                g_got = evc_grad_input(cache, uk, tables, up)
                g_want = tvc_grad_input(x, dense, up)
                gerr = _rel(g_got, g_want)
                max_grad = max(max_grad, gerr)
                res.check(gerr <= 1e-10,
                          f"input grad n={n}, r={r}: rel err {gerr:.3e} "
                          f"vs dense oracle (expected <= 1e-10)")
    res.detail = (f"max forward rel err {max_fwd:.3e}; "
                  f"max grad rel err {max_grad:.3e}")
    return res


def suite_gradcheck(seed: int = 0) -> tuple[SuiteResult, float]:
    """Finite-difference checks for the tape layers; returns the suite and
    the worst relative gradient error seen."""
    res = SuiteResult("gradcheck")
    rng = np.random.default_rng(seed)
    worst = 0.0

    quad = Var(rng.uniform(-1, 1, size=7))
    err = grad_check(tape_function(lambda: (quad * quad).sum(), [quad]),
                     pack([quad]), step=1e-6)
    worst = max(worst, err)
    res.check(err <= 1e-9, f"quadratic sanity: rel err {err:.3e} vs "
                           "expected <= 1e-9")

    geom = square_geometry(2, 3, 2)
    layer = init_volterra_layer(geom, out_channels=2, order=2, rng=rng)
    wvars = [Var(w) for w in layer.weights]
    bvar = Var(layer.bias)
    xvar = Var(rng.uniform(-1, 1, size=(2, 2, 3, 3)))

    def conv_loss():
        out = volterra_conv(xvar, tuple(wvars), bvar, geom, order=2)
        return (out * out).sum()

    leaves = [xvar, *wvars, bvar]
    err = grad_check(tape_function(conv_loss, leaves), pack(leaves),
                     step=1e-6)
    worst = max(worst, err)
    res.check(err <= 1e-5, f"conv layer: rel err {err:.3e} vs expected "
                           "<= 1e-5")

    params = HlaParams(HlaConfig(channels=2, reduction_ratio=1), rng)
    hx = Var(rng.uniform(0.1, 1.0, size=(2, 2, 4, 4)))

    def hla_loss():
        out = hla_forward(hx, params, training=True)
        return softmax_cross_entropy(
            out.mean(axis=(2, 3)), np.array([0, 1]))

    leaves = [hx, *params.trainables()]
    err = grad_check(tape_function(hla_loss, leaves), pack(leaves),
                     step=1e-6)
    worst = max(worst, err)
    res.check(err <= 1e-5, f"attention block: rel err {err:.3e} vs "
                           "expected <= 1e-5")

    res.detail = f"max gradient error {worst:.3e}"
    return res, worst


def run_verify(fault: str | None = None,
               seed: int = 0) -> tuple[list[SuiteResult], float]:
    """All suites in a fixed order; returns results and the worst
    finite-difference gradient error."""
    grad_suite, worst = suite_gradcheck(seed)
    results = [
        suite_counting(),
        suite_index_soundness(fault=fault, seed=seed),
        suite_oracle_equivalence(seed=seed),
        grad_suite,
    ]
    return results, worst


def report_ok(results: list[SuiteResult]) -> bool:
    return not any(r.failures for r in results)


def render_report(results: list[SuiteResult], max_grad_error: float) -> str:
    lines = []
    for r in results:
        status = "ok" if not r.failures else f"{len(r.failures)} FAILED"
        tail = f" ({r.detail})" if r.detail else ""
        lines.append(f"{r.suite}: {r.cases} cases, {status}{tail}")
        lines.extend(f"  {msg}" for msg in r.failures)
    total_cases = sum(r.cases for r in results)
    total_failures = sum(len(r.failures) for r in results)
    lines.append(
        f"suites run {len(results)}, cases {total_cases}, failures "
        f"{total_failures}, max gradient error {max_grad_error:.3e}"
    )
    return "\n".join(lines)


def write_report_csv(results: list[SuiteResult], path) -> None:
    """Write one row per suite to a path or an open text stream."""
    if hasattr(path, "write"):
        _write_report_stream(results, path)
        return
    with open(path, "w", newline="") as fh:
        _write_report_stream(results, fh)


def _write_report_stream(results, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(REPORT_COLUMNS)
    for r in results:
        writer.writerow([r.suite, r.cases, len(r.failures), r.detail])
