"""Experiment orchestration: seeded end-to-end trials, sweeps, metric
computation and figure datasets."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .channel import calibrate_power, draw_channels, draw_topology, transmit_slot
from .codebook import Codebook, build_codebook
from .decision import decide_active, theoretical_detection_errors
from .em import PriorEstimates
from .oamp import DetectorOptions, detect_slot
from .stitcher import StitchOptions, cer_min, kmeans_baseline, stitch_all
from .theory import state_evolution, theoretical_p2

_CODEBOOK_CACHE: dict = {}


@dataclass(frozen=True)
class ExperimentConfig:
    K_tot: int = 500
    K_a: int = 50
    M: int = 32
    J: int = 12
    L: int = 8
    n0: int = 1024
    N0_dbm: float = -110.0
    min_snr_db: float = 15.0
    T_D: int = 50
    tol_D: float = 1e-8
    T_S: int = 30
    tol_S: float = 1e-15
    # MAP rule by default: the energy-threshold rule presumes gains on the
    # active scale and misfires on learned near-zero gains of inactive rows
    decision_mode: str = "posterior"
    stitch_mode: str = "argmax"
    allow_collisions: bool = False
    genie_priors: bool = False
    genie_ka: bool = False
    compare_stitchers: bool = False
    with_theory: bool = False
    codebook_seed: int = 0
    base_seed: int = 0

    @property
    def b(self) -> int:
        return self.L * self.J

    def __post_init__(self):
        if self.n0 > (1 << self.J):
            raise ValueError(f"n0={self.n0} exceeds 2^J={1 << self.J}")
        if not 1 <= self.K_a <= self.K_tot:
            raise ValueError("need 1 <= K_a <= K_tot")


_SCENARIO_KEYS = {
    "K_tot": int, "K_a": int, "M": int, "J": int, "L": int, "n0": int,
    "N0_dbm": float, "min_snr_db": float, "seed": int,
    "T_D": int, "tol_D": float, "T_S": int, "tol_S": float,
    "decision_mode": str, "stitch_mode": str,
    "allow_collisions": lambda s: s.lower() in ("1", "true", "yes"),
    "genie_priors": lambda s: s.lower() in ("1", "true", "yes"),
    "genie_ka": lambda s: s.lower() in ("1", "true", "yes"),
    "codebook_seed": int,
}


def load_scenario(path) -> ExperimentConfig:
    """Parse a text key-value scenario file ('key = value', '#' comments)."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "b":
            continue  # derived
        if key not in _SCENARIO_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key '{key}'")
        values[key] = _SCENARIO_KEYS[key](val)
    if "seed" in values:
        values["base_seed"] = values.pop("seed")
    return ExperimentConfig(**values)


def save_scenario(config: ExperimentConfig, path) -> None:
    keys = ["K_tot", "K_a", "M", "L", "J", "n0", "N0_dbm", "min_snr_db"]
    lines = [f"{k} = {getattr(config, k)}" for k in keys]
    lines.append(f"seed = {config.base_seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def get_codebook(config: ExperimentConfig) -> Codebook:
    key = (config.n0, config.J, config.codebook_seed)
    if key not in _CODEBOOK_CACHE:
        _CODEBOOK_CACHE[key] = build_codebook(*key)
    return _CODEBOOK_CACHE[key]


@dataclass
class TrialMetrics:
    seed: int
    ka_hat: int
    ka_error: bool
    md: int
    fa: int
    stitch_err: int
    n_decisions: int
    p1: float
    p2: float
    msg_error_rate: float
    cer: float
    n_class_decisions: int
    detector_iters: list
    detector_converged: bool
    stitch_rounds: int
    stitch_converged: bool
    wall_time: float
    sigma2: float
    p1_theory: float = float("nan")
    p2_theory: float = float("nan")
    u_theory: float = float("nan")
    cer_kmeans: float = float("nan")
    p2_kmeans: float = float("nan")
    nmse_trace: list = field(default_factory=list)
    rel_traces: list = field(default_factory=list)  # per slot
    label_trace: list = field(default_factory=list)


def _draw_messages(K_a, J, L, allow_collisions, rng, max_attempts=1000):
    """Per-UE message bits and codeword indices (one-based).

    Unless collisions are allowed, colliding sub-blocks are redrawn per slot
    (all but one UE of each duplicate index), which keeps bits and indices
    consistent without rejecting whole message sets."""
    weights = 1 << np.arange(J - 1, -1, -1, dtype=np.int64)
    bits = rng.integers(0, 2, size=(K_a, L, J))
    if not allow_collisions:
        for l in range(L):
            for _ in range(max_attempts):
                idx_l = bits[:, l] @ weights
                _, first = np.unique(idx_l, return_index=True)
                dup = np.setdiff1d(np.arange(K_a), first)
                if dup.size == 0:
                    break
                bits[dup, l] = rng.integers(0, 2, size=(dup.size, J))
            else:
                raise RuntimeError("could not draw a collision-free sub-slot")
    idx = bits @ weights + 1  # (K_a, L)
    return bits.reshape(K_a, L * J), idx


def _genie_priors(config, topology, sigma2, slot_idx, fill_rng) -> PriorEstimates:
    """True priors for one sub-slot: model activity probability, true row
    gains on active rows, gains resampled from the active-gain distribution
    elsewhere (every row needs a prior gain under the Bernoulli-Gaussian
    model)."""
    N = 1 << config.J
    gains = topology.active_gains
    g = fill_rng.choice(gains, size=N, replace=True)
    g[slot_idx - 1] = gains
    eps = np.full(N, config.K_a / N)
    return PriorEstimates(sigma2=sigma2, eps=eps, g=g)


def theoretical_cer(gains, v_res, M, n_samples=200, seed=0) -> float:
    """Minimum CER of the Gaussian class model with labels g_k + v_res,
    estimated by sampling n_samples channel draws per class."""
    gains = np.asarray(gains, dtype=float)
    xi = gains + v_res
    K = len(xi)
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(K):
        std = np.sqrt(xi[k] / 2.0)
        h = std * (rng.standard_normal((n_samples, M))
                   + 1j * rng.standard_normal((n_samples, M)))
        energy = np.sum(np.abs(h) ** 2, axis=1)
        rows.append(-M * np.log(xi)[None, :] - energy[:, None] / xi[None, :])
    log_cond = np.vstack(rows)
    return cer_min(log_cond, n_per_class=n_samples)


def _trial_theory(config, topology, sigma2):
    eps = config.K_a / 2.0 ** config.J
    se = state_evolution(sigma2, eps, topology.active_gains,
                         config.n0, config.J, T=200)
    u_inf = se.u_limit
    det = theoretical_detection_errors(config.M, u_inf, topology.active_gains,
                                       config.K_a, config.J)
    v_res = se.v[-1]
    cer = theoretical_cer(topology.active_gains, v_res, config.M,
                          seed=config.base_seed)
    p2 = theoretical_p2(config.K_a, config.J, det.p_md_bar, det.p_fa_bar, cer)
    return det.p1, p2, u_inf


def run_trial(config: ExperimentConfig, seed: int,
              codebook: Codebook | None = None,
              collect_traces: bool = False) -> TrialMetrics:
    """One seeded end-to-end trial: topology, power calibration, encoding,
    channel, per-slot detection, activity decision, stitching and scoring."""
    t0 = time.perf_counter()
    cb = codebook or get_codebook(config)
    ss = np.random.SeedSequence([seed, config.base_seed])
    s_top, s_msg, s_ch, s_noise, s_fill = ss.spawn(5)
    topology = draw_topology(config.K_tot, config.K_a,
                             s_top.generate_state(1)[0])
    budget = calibrate_power(topology, config.n0, config.N0_dbm,
                             config.min_snr_db)
    msg_rng = np.random.default_rng(s_msg)
    bits, idx = _draw_messages(config.K_a, config.J, config.L,
                               config.allow_collisions, msg_rng)
    H = draw_channels(topology, config.M, config.L, s_ch.generate_state(1)[0])
    noise_seeds = s_noise.generate_state(config.L)
    fill_rng = np.random.default_rng(s_fill)

    slot_lists = []
    det_iters, det_conv = [], True
    nmse_trace = []
    rel_traces = []
    for l in range(config.L):
        Y, X = transmit_slot(cb, idx[:, l], H[l], budget.sigma2,
                             noise_seeds[l])
        priors = None
        if config.genie_priors:
            priors = _genie_priors(config, topology, budget.sigma2,
                                   idx[:, l], fill_rng)
        opts = DetectorOptions(max_iters=config.T_D, tol=config.tol_D,
                               em="sigma2" if config.genie_priors else True,
                               priors=priors)
        result = detect_slot(Y, cb, opts, truth=X if collect_traces else None)
        det_iters.append(result.iterations_used)
        det_conv = det_conv and result.converged
        if collect_traces:
            rel_traces.append([tr[5] for tr in result.trace])
            if l == 0:
                nmse_trace = [tr[2] for tr in result.trace]
        k_fixed = config.K_a if (config.genie_ka and l == 0) else None
        slot_lists.append(decide_active(result, slot=l + 1,
                                        mode=config.decision_mode,
                                        k_fixed=k_fixed))

    sopts = StitchOptions(max_rounds=config.T_S, tol=config.tol_S,
                          mode=config.stitch_mode)
    assignment, messages = stitch_all(slot_lists, config.J, sopts)
    metrics = compute_metrics(bits, idx, slot_lists, assignment, messages,
                              config, seed=seed)
    metrics.detector_iters = det_iters
    metrics.detector_converged = det_conv
    metrics.sigma2 = budget.sigma2
    if collect_traces:
        metrics.nmse_trace = nmse_trace
        metrics.rel_traces = rel_traces
        metrics.label_trace = [
            float(np.max(np.abs(r["final"] - r["start"])))
            for r in assignment.round_trace]
    if config.compare_stitchers:
        km_assign, km_msgs = kmeans_baseline(slot_lists, config.J, sopts)
        km = compute_metrics(bits, idx, slot_lists, km_assign, km_msgs,
                             config, seed=seed)
        metrics.cer_kmeans = km.cer
        metrics.p2_kmeans = km.p2
    if config.with_theory:
        metrics.p1_theory, metrics.p2_theory, metrics.u_theory = \
            _trial_theory(config, topology, budget.sigma2)
    metrics.wall_time = time.perf_counter() - t0
    return metrics


def compute_metrics(bits, idx, slot_lists, assignment, messages,
                    config: ExperimentConfig, seed: int = -1) -> TrialMetrics:
    """Score detections and stitching against ground truth.

    Empirical P1 counts per-(slot, codeword) detection errors; P2 adds the
    correctly detected codewords delivered to the wrong class.  Classes are
    matched to true UEs by maximum-overlap assignment (evaluation only).
    """
    K_a, L = idx.shape
    N = 1 << config.J
    n_decisions = L * N

    md = fa = 0
    truth_owner = []  # per slot: index -> UE
    for l in range(L):
        owner = {}
        for k in range(K_a):
            j = int(idx[k, l])
            owner.setdefault(j, []).append(k)
        truth_owner.append(owner)
        detected = set(int(j) for j in slot_lists[l].indices)
        active = set(owner)
        md += sum(len(owner[j]) for j in active - detected)
        fa += len(detected - active)

    # class -> (slot -> index) from the stitcher, inverted per slot
    n_classes = assignment.n_classes
    class_at = [dict() for _ in range(L)]  # slot: index -> class
    for c in range(n_classes):
        for l, j in assignment.members[c].items():
            class_at[l - 1][j] = c

    overlap = np.zeros((n_classes, K_a))
    for l in range(L):
        for k in range(K_a):
            j = int(idx[k, l])
            c = class_at[l].get(j)
            if c is not None:
                overlap[c, k] += 1
    ue_of_class = {}
    if n_classes:
        # canonical class order (slot-1 seed index) so overlap ties break
        # the same way no matter how the stitcher numbered its classes
        canon = sorted(range(n_classes),
                       key=lambda c: assignment.members[c].get(1, -1))
        rows, cols = linear_sum_assignment(-overlap[canon])
        for r, k in zip(rows, cols):
            if overlap[canon[r], k] > 0:
                ue_of_class[canon[r]] = k

    stitch_err = 0
    cls_err = cls_total = 0
    for l in range(L):
        owner = truth_owner[l]
        for j in (int(x) for x in slot_lists[l].indices):
            ks = owner.get(j)
            if ks is None or len(ks) != 1:
                continue  # false alarm or collided codeword: not a stitch case
            c = class_at[l].get(j)
            wrong = c is None or ue_of_class.get(c) != ks[0]
            stitch_err += wrong
            if l >= 1:  # classification decisions happen in slots 2..L
                cls_total += 1
                cls_err += wrong

    class_of_ue = {k: c for c, k in ue_of_class.items()}
    msg_err = 0
    for k in range(K_a):
        c = class_of_ue.get(k)
        ok = (c is not None and messages.bits[c] is not None
              and np.array_equal(messages.bits[c], bits[k]))
        msg_err += not ok
    ka_hat = len(slot_lists[0]) if slot_lists else 0

    return TrialMetrics(
        seed=seed,
        ka_hat=ka_hat,
        ka_error=ka_hat != K_a,
        md=md, fa=fa, stitch_err=stitch_err, n_decisions=n_decisions,
        p1=(md + fa) / n_decisions,
        p2=(fa + stitch_err) / n_decisions,
        msg_error_rate=msg_err / K_a,
        cer=(cls_err / cls_total) if cls_total else float("nan"),
        n_class_decisions=cls_total,
        detector_iters=[], detector_converged=True,
        stitch_rounds=assignment.rounds_used,
        stitch_converged=assignment.converged,
        wall_time=0.0, sigma2=float("nan"))


def _worker(args):
    config, seed, collect = args
    return run_trial(config, seed, collect_traces=collect)


def run_many(config: ExperimentConfig, seeds, parallel: int = 1,
             collect_traces: bool = False):
    """Run independent trials; aggregation is order-independent."""
    jobs = [(config, int(s), collect_traces) for s in seeds]
    if parallel <= 1 or len(jobs) == 1:
        return [_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as ex:
        return list(ex.map(_worker, jobs, chunksize=max(1, len(jobs) // (4 * parallel))))


def trial_seeds(base_seed: int, tag: int, n: int):
    ss = np.random.SeedSequence([base_seed, tag])
    return [int(s) for s in ss.generate_state(n, dtype=np.uint64)]


def binomial_ci(count: int, n: int, z: float = 3.0):
    p = count / n
    se = np.sqrt(max(p * (1 - p), 1e-300) / n)
    return p, se, max(p - z * se, 0.0), min(p + z * se, 1.0)


def aggregate(results, value=None):
    """Pool counts across trials into one sweep row with binomial CIs."""
    n_dec = sum(r.n_decisions for r in results)
    md = sum(r.md for r in results)
    fa = sum(r.fa for r in results)
    st = sum(r.stitch_err for r in results)
    p1, p1_se, _, _ = binomial_ci(md + fa, n_dec)
    p2, p2_se, _, _ = binomial_ci(fa + st, n_dec)
    cers = [r.cer for r in results if np.isfinite(r.cer)]
    row = {
        "value": value,
        "trials": len(results),
        "n_decisions": n_dec,
        "p1": p1, "p1_se": p1_se,
        "p2": p2, "p2_se": p2_se,
        "msg_error_rate": float(np.mean([r.msg_error_rate for r in results])),
        "cer": float(np.mean(cers)) if cers else float("nan"),
        "ka_error_rate": float(np.mean([r.ka_error for r in results])),
        "mean_iters": float(np.mean([np.mean(r.detector_iters) if r.detector_iters
                                     else np.nan for r in results])),
    }
    th1 = [r.p1_theory for r in results if np.isfinite(r.p1_theory)]
    th2 = [r.p2_theory for r in results if np.isfinite(r.p2_theory)]
    if th1:
        row["p1_theory"] = float(np.mean(th1))
    if th2:
        row["p2_theory"] = float(np.mean(th2))
    return row


_AXES = {"snr_db": "min_snr_db", "M": "M", "K_a": "K_a"}


def run_sweep(config: ExperimentConfig, axis: str, values, trials: int,
              parallel: int = 1):
    """Sweep one axis, aggregating per value with binomial CIs."""
    if axis not in _AXES:
        raise ValueError(f"axis must be one of {sorted(_AXES)}")
    rows = []
    for vi, val in enumerate(values):
        cfg = replace(config, **{_AXES[axis]: type(getattr(config, _AXES[axis]))(val)})
        seeds = trial_seeds(cfg.base_seed, vi, trials)
        results = run_many(cfg, seeds, parallel)
        rows.append(aggregate(results, value=val))
    return rows


def write_csv(rows, path) -> None:
    keys = sorted({k for r in rows for k in r}, key=lambda k: (k != "value", k))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_manifest(out_dir, config: ExperimentConfig, seeds, elapsed: float):
    cb = get_codebook(config)
    manifest = {
        "config": {f.name: getattr(config, f.name) for f in fields(config)},
        "seeds": [int(s) for s in seeds],
        "codebook_digest": cb.param_digest(),
        "elapsed_seconds": elapsed,
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


FIGURE_IDS = ("convergence", "ka_sensitivity", "snr_m", "saturation",
              "p1_theory", "stitcher_compare")


def reproduce_figure(fig_id: str, config: ExperimentConfig, out_dir,
                     trials: int | None = None, parallel: int = 1):
    """Emit one figure's data series as CSV; plotting is external."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if fig_id == "convergence":
        n = trials or 5
        rows = []
        for ka in (50, 100, 150):
            cfg = replace(config, K_a=ka)
            results = run_many(cfg, trial_seeds(cfg.base_seed, ka, n),
                               parallel, collect_traces=True)
            depth = max(len(r.nmse_trace) for r in results)
            for t in range(depth):
                vals = [r.nmse_trace[t] for r in results
                        if len(r.nmse_trace) > t]
                rows.append({"value": ka, "iter": t + 1,
                             "nmse": float(np.nanmean(vals))})
            for r in results[:1]:
                for t, d in enumerate(r.label_trace, start=1):
                    rows.append({"value": ka, "iter": t, "label_change": d})
    elif fig_id == "ka_sensitivity":
        n = trials or 100
        snrs = [0, 5, 10, 15, 20, 25, 30]
        est = run_sweep(replace(config, genie_ka=False), "snr_db", snrs, n,
                        parallel)
        gen = run_sweep(replace(config, genie_ka=True), "snr_db", snrs, n,
                        parallel)
        rows = []
        for e, g in zip(est, gen):
            rows.append({"value": e["value"],
                         "p2_estimated": e["p2"], "p2_estimated_se": e["p2_se"],
                         "p2_genie": g["p2"], "p2_genie_se": g["p2_se"],
                         "ka_error_rate": e["ka_error_rate"],
                         "trials": e["trials"]})
    elif fig_id == "snr_m":
        n = trials or 100
        snrs = [-10, -5, 0, 5, 10, 15, 20, 25, 30]
        rows = []
        for m in (32, 64):
            for r in run_sweep(replace(config, M=m), "snr_db", snrs, n,
                               parallel):
                r["M"] = m
                rows.append(r)
    elif fig_id == "saturation":
        n = trials or 30
        ms = [8, 16, 32, 64, 128, 256, 512]
        rows = run_sweep(replace(config, with_theory=True), "M", ms, n,
                         parallel)
        sat = (config.K_a - 1) / 2.0 ** config.J
        for r in rows:
            r["p2_saturation"] = sat
    elif fig_id == "p1_theory":
        n = trials or 200
        snrs = [-10, -5, 0, 5, 10, 15, 20, 25, 30]
        rows = []
        for ka in (30, 50):
            cfg = replace(config, M=8, K_a=ka, genie_priors=True,
                          with_theory=True)
            for r in run_sweep(cfg, "snr_db", snrs, n, parallel):
                r["K_a"] = ka
                rows.append(r)
    elif fig_id == "stitcher_compare":
        n = trials or 50
        cfg = replace(config, M=16, compare_stitchers=True)
        results = run_many(cfg, trial_seeds(cfg.base_seed, 12, n), parallel)
        rows = [{"value": r.seed, "cer_bayes": r.cer,
                 "cer_kmeans": r.cer_kmeans, "p2_bayes": r.p2,
                 "p2_kmeans": r.p2_kmeans} for r in results]
        rows.append({"value": "mean",
                     "cer_bayes": float(np.nanmean([r.cer for r in results])),
                     "cer_kmeans": float(np.nanmean([r.cer_kmeans
                                                     for r in results]))})
    else:
        raise ValueError(
            f"unknown figure id '{fig_id}'; valid ids: {', '.join(FIGURE_IDS)}")
    path = out_dir / f"{fig_id}.csv"
    write_csv(rows, path)
    write_manifest(out_dir, config, [], time.perf_counter() - t0)
    return path
