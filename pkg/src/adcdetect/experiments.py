"""Monte Carlo experiments: configuration, seeded trials, metrics and CSV.

Every trial owns generators derived from (master_seed, trial, stream), so a
trial's draws never depend on which worker runs it or on its neighbours.
Trials are grouped into fixed chunks; the chunks are farmed out to a
process pool and reduced in trial order, so the CSV is byte-identical for
any number of workers.

Within a trial every compared method sees the same activity pattern,
preambles, channels and noise (common random numbers). Stream 0 holds the
ground-truth draws, stream 1 the Phase-I noise, and streams from 10 upward
the per-method sampling generators.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import stats

from .channel import (LinkBudget, complex_normal, draw_activity, exponential_covariance,
                      hermitian_sqrt, link_budget_to_params)
from .detector import (DetectionModel, DetectionProblem, DetectorConfig, detection_errors,
                       infinite_adc_detect, nsgd_detect_batch)
from .k_estimator import EstimatorConfig, oea_estimate, pea_estimate
from .quantizer import Codebook, quantize
from .signal_model import build_stacked_covariance, generate_preambles, real_expand_received

EXPERIMENTS = ("detect", "protocol", "estimate-k", "converge")
CHANNELS = ("iid", "exponential")
CSV_COLUMNS = ("experiment", "B", "N", "K", "M", "L_I", "L_N", "epsilon", "threshold_or_step",
               "mdp", "fap", "mdp_se", "fap_se", "e_k", "iterations_mean", "seed", "delta")
TARGET_FAP = 0.1


def _default_grid() -> tuple:
    return tuple(round(0.01 * i, 2) for i in range(401)) + (math.inf,)


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment description; every field is a ``key = value`` line.

    ``bits`` lists ADC resolutions (None = infinite, written ``inf``).
    ``k_hat_mode`` lists how Phase II learns K: ``truth``, a number,
    ``oea`` or ``pea``. ``threshold_grid`` is in units of beta.
    """

    experiment: str = "detect"
    N: int = 100
    K: int = 10
    M: int = 32
    L_I: int = 13
    L_N: int = 0
    bits: tuple = (4,)
    rho: float = 2.0
    epsilon: float = 1e-3
    max_iterations: int = 0
    channel: str = "iid"
    c: float = 0.5
    k_hat_mode: tuple = ("truth",)
    k0: tuple = (1.0,)
    phase1_bits: int = 4
    inner_epsilon: float = 1e-3
    inner_max: int = 500
    accumulate: bool = False
    correlated_variant: bool = True
    trials: int = 100
    chunk_size: int = 10
    master_seed: int = 0
    threshold_grid: tuple = field(default_factory=_default_grid)
    tx_power_dbm: float = 23.0
    noise_psd_dbm_hz: float = -169.0
    bandwidth_hz: float = 10e6
    distance_km: float = 1.0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        for name in ("N", "M", "L_I", "trials", "chunk_size", "phase1_bits", "inner_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.L_N < 0 or self.max_iterations < 0:
            raise ValueError("L_N and max_iterations must be nonnegative")
        if not 0 <= self.K <= self.N:
            raise ValueError(f"need 0 <= K <= N, got K={self.K}, N={self.N}")
        if self.channel not in CHANNELS:
            raise ValueError(f"channel must be one of {CHANNELS}, got {self.channel!r}")
        if abs(self.c) > 1:
            raise ValueError(f"|c| must be <= 1, got {self.c}")
        if self.epsilon <= 0 or self.inner_epsilon <= 0 or self.rho <= 0:
            raise ValueError("epsilon, inner_epsilon and rho must be positive")
        if not self.bits or any(b is not None and b < 1 for b in self.bits):
            raise ValueError(f"bits must be a nonempty list of positive ints or inf, got {self.bits}")
        grid = np.asarray(self.threshold_grid, dtype=float)
        if grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise ValueError("threshold_grid must be strictly increasing with at least two entries")
        for mode in self.k_hat_mode:
            if mode in ("oea", "pea") and self.L_N < 1 and self.experiment == "detect":
                raise ValueError(f"k_hat_mode {mode!r} needs L_N >= 1")
            if mode not in ("truth", "oea", "pea") and not 0 <= float(mode) <= self.N:
                raise ValueError(f"fixed k_hat {mode!r} must lie in [0, N]")
        if any(not 0 <= k <= self.N for k in self.k0):
            raise ValueError(f"k0 values must lie in [0, N], got {self.k0}")
        if self.experiment == "estimate-k" and self.L_N < 1:
            raise ValueError(f"{self.experiment} needs L_N >= 1")

    @property
    def L(self) -> int:
        """Total preamble length L = L_N + L_I."""
        return self.L_N + self.L_I

    def link(self) -> tuple[float, float]:
        lb = LinkBudget(self.noise_psd_dbm_hz, self.bandwidth_hz, self.tx_power_dbm, self.distance_km)
        return link_budget_to_params(lb)

    def detector_config(self, record_path: bool = False) -> DetectorConfig:
        return DetectorConfig(self.epsilon, self.max_iterations or None, record_path=record_path)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# key = value parsing


def _fmt_float(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _parse_bits(text: str) -> tuple:
    out = []
    for tok in _tokens(text):
        out.append(None if tok.lower() in ("inf", "infinite") else int(tok))
    return tuple(out)


def _parse_grid(text: str) -> tuple:
    out = []
    for tok in _tokens(text):
        if tok.count(":") == 2:
            start, stop, step = (float(p) for p in tok.split(":"))
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            out.extend(round(start + step * i, 12) for i in range(n))
        else:
            out.append(float(tok))
    return tuple(out)


def _tokens(text: str) -> list[str]:
    toks = [t.strip() for t in text.split(",")]
    if any(not t for t in toks):
        raise ValueError("empty list entry")
    return toks


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_modes(text: str) -> tuple:
    out = []
    for tok in _tokens(text):
        low = tok.lower()
        if low in ("truth", "oea", "pea"):
            out.append(low)
        else:
            float(tok)
            out.append(tok)
    return tuple(out)


_PARSERS = {
    int: int, float: float, str: str, bool: _parse_bool,
    "bits": _parse_bits, "threshold_grid": _parse_grid, "k_hat_mode": _parse_modes,
    "k0": lambda t: tuple(float(x) for x in _tokens(t)),
}
_TYPES = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}


def _field_parser(f: dataclasses.Field):
    if f.name in _PARSERS:
        return _PARSERS[f.name]
    return _PARSERS[_TYPES[f.type] if isinstance(f.type, str) else f.type]


def _format_value(name: str, value: Any) -> str:
    if name == "bits":
        return ", ".join("inf" if b is None else str(b) for b in value)
    if name in ("threshold_grid", "k0"):
        return ", ".join(_fmt_float(v) for v in value)
    if name == "k_hat_mode":
        return ", ".join(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _fmt_float(value)
    return str(value)


def config_to_lines(cfg: ExperimentConfig) -> list[str]:
    return [f"{f.name} = {_format_value(f.name, getattr(cfg, f.name))}"
            for f in dataclasses.fields(cfg)]


def parse_overrides(pairs: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply textual ``key -> value`` overrides; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for key, text in pairs.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        try:
            values[key] = _field_parser(fields[key])(text.strip())
        except ValueError as exc:
            raise ValueError(f"invalid value for {key!r}: {text.strip()!r} ({exc})") from None
    base = base or ExperimentConfig()
    return dataclasses.replace(base, **values)


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in pairs:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    pairs.update(overrides or {})
    return parse_overrides(pairs)


def parse_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), overrides)


def config_from_csv(path) -> ExperimentConfig:
    """Recover the configuration from the comment header of an emitted CSV."""
    lines = []
    with open(path) as fh:
        for line in fh:
            if not line.startswith("# "):
                break
            lines.append(line[2:])
    return parse_config_text("".join(lines))


# ---------------------------------------------------------------------------
# seeding and per-trial draws


def trial_rng(master_seed: int, trial: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(trial, stream)))


@dataclass
class TrialDraw:
    """Ground truth shared by every method in one trial."""

    alpha: np.ndarray
    S: np.ndarray
    H: np.ndarray
    Y: np.ndarray
    s1: np.ndarray
    Z1: np.ndarray
    Y1: np.ndarray


def antenna_covariance(cfg: ExperimentConfig, channel: str | None = None) -> np.ndarray | None:
    channel = channel or cfg.channel
    if channel == "iid":
        return None
    return exponential_covariance(cfg.c, cfg.M)


def draw_trial(cfg: ExperimentConfig, trial: int, beta: float, sigma2: float,
               root: np.ndarray | None) -> TrialDraw:
    rng = trial_rng(cfg.master_seed, trial, 0)
    alpha = draw_activity(cfg.N, cfg.K, rng)
    S = generate_preambles(cfg.L, cfg.N, rng)
    H = complex_normal((cfg.N, cfg.M), rng)
    if root is not None:
        H = H @ root.T
    Z = complex_normal((cfg.L, cfg.M), rng, sigma2)
    Y = S @ (np.sqrt(alpha * beta)[:, None] * H) + Z
    # Phase I: all active devices send the same symbol through their own channels
    s1 = generate_preambles(max(cfg.L_N, 1), 1, rng)[:, 0]
    noise = trial_rng(cfg.master_seed, trial, 1)
    Z1 = complex_normal((s1.size, cfg.M), noise, sigma2)
    Y1 = np.sqrt(beta) * np.outer(s1, alpha @ H) + Z1
    return TrialDraw(alpha, S, H, Y, s1, Z1, Y1)


def _estimator_config(cfg: ExperimentConfig, beta: float, sigma2: float, K0: float,
                      L_N: int | None = None) -> EstimatorConfig:
    return EstimatorConfig(cfg.N, beta, sigma2, cfg.M, L_N or cfg.L_N, K0, cfg.rho, cfg.phase1_bits,
                           cfg.inner_epsilon, cfg.inner_max, cfg.accumulate)


def _pea(draw: TrialDraw, cfg: ExperimentConfig, beta, sigma2, K0, rng):
    hook = lambda i: (draw.s1[i - 1], real_expand_received(draw.Y1[i - 1:i]))
    return pea_estimate(hook, _estimator_config(cfg, beta, sigma2, K0), rng)


# ---------------------------------------------------------------------------
# methods


@dataclass(frozen=True)
class Method:
    """One detector variant: ADC bits, how K is obtained, preamble rows used."""

    label: str
    bits: int | None
    k_hat: str
    rows: int


def detection_methods(cfg: ExperimentConfig) -> list[Method]:
    if cfg.experiment == "protocol":
        out = []
        for b in cfg.bits:
            tag = "inf" if b is None else b
            out.append(Method(f"protocol[B={tag}]", b, "pea", cfg.L_I))
            out.append(Method(f"benchmark1[B={tag}]", b, "truth", cfg.L))
            out.append(Method(f"benchmark2[B={tag}]", b, _fmt_float(cfg.k0[0]), cfg.L))
        return out
    out = []
    for b in cfg.bits:
        if b is None:
            out.append(Method("detect[B=inf]", None, "truth", cfg.L_I))
            continue
        for mode in cfg.k_hat_mode:
            out.append(Method(f"detect[B={b},khat={mode}]", b, mode, cfg.L_I))
    return out


def _effective_mode(mode: str, cfg: ExperimentConfig) -> str:
    # with no Phase-I symbols the estimators return their initial value
    if mode in ("oea", "pea") and cfg.L_N == 0:
        return _fmt_float(cfg.k0[0])
    return mode


def _resolve_k_hat(mode: str, cfg, draw, beta, sigma2, trial, cache) -> float:
    mode = _effective_mode(mode, cfg)
    if mode == "truth":
        return float(cfg.K)
    if mode in ("oea", "pea"):
        if mode not in cache:
            rng = trial_rng(cfg.master_seed, trial, 2 if mode == "pea" else 3)
            est = _estimator_config(cfg, beta, sigma2, cfg.k0[0])
            if mode == "pea":
                cache[mode] = _pea(draw, cfg, beta, sigma2, cfg.k0[0], rng).k_hat
            else:
                cache[mode] = oea_estimate(real_expand_received(draw.Y1), draw.s1, est, rng).k_hat
        return cache[mode]
    return float(mode)


def _detection_chunk(cfg: ExperimentConfig, trials: list[int], record_path: bool = False) -> list[dict]:
    """Run every method on the given trials; returns one dict per trial."""
    beta, sigma2 = cfg.link()
    Cm = antenna_covariance(cfg)
    root = None if Cm is None else hermitian_sqrt(Cm)
    C = None if Cm is None else build_stacked_covariance(np.broadcast_to(Cm, (cfg.N,) + Cm.shape))
    methods = detection_methods(cfg) if cfg.experiment != "converge" else [
        Method(f"converge[B={'inf' if b is None else b}]", b, "truth", cfg.L_I) for b in cfg.bits]
    draws = {t: draw_trial(cfg, t, beta, sigma2, root) for t in trials}
    caches: dict[int, dict] = {t: {} for t in trials}
    models: dict[tuple[int, int], DetectionModel] = {}
    out = {t: {"alpha": draws[t].alpha, "methods": {}} for t in trials}
    dcfg = cfg.detector_config(record_path)
    # methods with identical inputs share a sampling stream, so they agree exactly
    signatures = [(m.bits, _effective_mode(m.k_hat, cfg), m.rows) for m in methods]

    for meth, sig in zip(methods, signatures):
        idx = signatures.index(sig)
        problems, k_hats = [], []
        for t in trials:
            d = draws[t]
            key = (t, meth.rows)
            if key not in models:
                models[key] = DetectionModel.build(d.S[:meth.rows], sigma2, cfg.M, C)
            k_hat = _resolve_k_hat(meth.k_hat, cfg, d, beta, sigma2, t, caches[t])
            k_hats.append(k_hat)
            ybar = real_expand_received(d.Y[:meth.rows])
            if meth.bits is None:
                problems.append((ybar, models[key]))
                continue
            cb = Codebook.design(k_hat, beta, sigma2, cfg.rho, meth.bits)
            problems.append(DetectionProblem(quantize(ybar, cb), cb, models[key],
                                             trial_rng(cfg.master_seed, t, 10 + idx)))
        if meth.bits is None:
            results = [infinite_adc_detect(y, m, dcfg) for y, m in problems]
        else:
            results = nsgd_detect_batch(problems, dcfg)
        for t, k_hat, res in zip(trials, k_hats, results):
            entry = {"gamma": res.gamma_hat, "iterations": res.iterations,
                     "converged": res.converged, "k_hat": k_hat}
            if record_path:
                entry["delta"] = res.delta_trace()
            out[t]["methods"][meth.label] = entry
    return [out[t] for t in trials]


def _estimation_chunk(cfg: ExperimentConfig, trials: list[int]) -> list[dict]:
    beta, sigma2 = cfg.link()
    variants = [cfg.channel]
    if cfg.correlated_variant and cfg.channel == "iid":
        variants.append("exponential")
    roots = {v: (None if v == "iid" else hermitian_sqrt(antenna_covariance(cfg, v))) for v in variants}
    rows = []
    for t in trials:
        base = draw_trial(cfg, t, beta, sigma2, None)
        res = {}
        for vi, v in enumerate(variants):
            H = base.H if roots[v] is None else base.H @ roots[v].T
            Y1 = np.sqrt(beta) * np.outer(base.s1, base.alpha @ H) + base.Z1
            draw = dataclasses.replace(base, H=H, Y1=Y1)
            for ki, K0 in enumerate(cfg.k0):
                tag = _variant_tag(cfg, v)
                rng = trial_rng(cfg.master_seed, t, 10 + 2 * (vi * len(cfg.k0) + ki))
                trace = _pea(draw, cfg, beta, sigma2, K0, rng)
                res[f"pea[K0={K0:g},{tag}]"] = (trace.k_hats, trace.inner_iterations)
                orng = trial_rng(cfg.master_seed, t, 11 + 2 * (vi * len(cfg.k0) + ki))
                oea_k, oea_its = [K0], []
                for l in range(1, cfg.L_N + 1):
                    est = _estimator_config(cfg, beta, sigma2, K0, l)
                    tr = oea_estimate(real_expand_received(Y1[:l]), base.s1[:l], est, orng)
                    oea_k.append(tr.k_hat)
                    oea_its.append(tr.inner_iterations[0])
                res[f"oea[K0={K0:g},{tag}]"] = (np.array(oea_k), np.array(oea_its))
        rows.append(res)
    return rows


def _variant_tag(cfg: ExperimentConfig, channel: str) -> str:
    return "iid" if channel == "iid" else f"c={cfg.c:g}"


def _chunk_worker(args):
    kind, cfg, trials = args
    if kind == "estimate":
        return _estimation_chunk(cfg, trials)
    return _detection_chunk(cfg, trials, record_path=(kind == "converge"))


def run_trials(cfg: ExperimentConfig, kind: str, workers: int = 1) -> list:
    """Per-trial results in trial order; chunking is fixed by the config."""
    chunks = [list(range(s, min(s + cfg.chunk_size, cfg.trials)))
              for s in range(0, cfg.trials, cfg.chunk_size)]
    jobs = [(kind, cfg, ch) for ch in chunks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_worker, jobs))
    else:
        parts = [_chunk_worker(j) for j in jobs]
    return [r for part in parts for r in part]


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    """Aggregated results; ``rows`` become the CSV, ``summary`` holds the
    per-method point statistics used by the acceptance tests."""

    config: ExperimentConfig
    rows: list[dict]
    summary: dict[str, dict] = field(default_factory=dict)
    wall_clock: float = 0.0


def standard_error(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


def roc_per_trial(gammas: np.ndarray, alphas: np.ndarray, thresholds: np.ndarray):
    """Per-trial (mdp, fap) arrays of shape (T, len(thresholds))."""
    active = alphas.astype(bool)
    declared = gammas[:, None, :] > thresholds[None, :, None]
    K = active.sum(axis=1)
    n_inactive = active.shape[1] - K
    missed = (~declared & active[:, None, :]).sum(axis=2)
    false = (declared & ~active[:, None, :]).sum(axis=2)
    mdp = np.where(K[:, None] > 0, missed / np.maximum(K, 1)[:, None], 0.0)
    fap = np.where(n_inactive[:, None] > 0, false / np.maximum(n_inactive, 1)[:, None], 0.0)
    return mdp, fap


def mdp_at_fap(mdp: np.ndarray, fap: np.ndarray, thresholds: np.ndarray, target: float = TARGET_FAP):
    """MDP where the trial-averaged FAP crosses ``target``.

    The averaged ROC is linearly interpolated between neighbouring
    thresholds; the all-active point (FAP 1, MDP 0) closes the curve below
    the smallest threshold. The same interpolation weight is applied to
    each trial, giving per-trial values and hence a standard error.
    Returns (mean, se, threshold, per_trial).
    """
    T = mdp.shape[0]
    m = np.concatenate([np.zeros((T, 1)), mdp], axis=1)
    f = np.concatenate([np.ones((T, 1)), fap], axis=1)
    thr = np.concatenate([[-math.inf], thresholds])
    fbar = f.mean(axis=0)
    j = int(np.flatnonzero(fbar >= target)[-1])
    if j == fbar.size - 1:
        per = m[:, j]
        return float(per.mean()), standard_error(per), float(thr[j]), per
    gap = fbar[j] - fbar[j + 1]
    w = 0.0 if gap <= 0 else (fbar[j] - target) / gap
    per = (1 - w) * m[:, j] + w * m[:, j + 1]
    tau = thr[j + 1] if not math.isfinite(thr[j]) else (1 - w) * thr[j] + w * thr[j + 1]
    return float(per.mean()), standard_error(per), float(tau), per


def paired_one_sided(worse, better) -> float:
    """p-value of H1: mean(worse - better) > 0, paired t-test."""
    d = np.asarray(worse, dtype=float) - np.asarray(better, dtype=float)
    if np.allclose(d, d[0]):
        return 0.0 if d[0] > 0 else 1.0
    return float(stats.ttest_1samp(d, 0.0, alternative="greater").pvalue)


def _row(cfg: ExperimentConfig, experiment: str, B, step, **values) -> dict:
    row = {"experiment": experiment, "B": B, "N": cfg.N, "K": cfg.K, "M": cfg.M,
           "L_I": cfg.L_I, "L_N": cfg.L_N, "epsilon": cfg.epsilon, "threshold_or_step": step,
           "seed": cfg.master_seed}
    row.update(values)
    return row


def _detection_record(cfg: ExperimentConfig, results: list[dict], methods: list[Method]) -> MetricsRecord:
    beta, _ = cfg.link()
    grid = np.asarray(cfg.threshold_grid, dtype=float)
    alphas = np.array([r["alpha"] for r in results])
    rows, summary = [], {}
    for meth in methods:
        per = [r["methods"][meth.label] for r in results]
        gammas = np.array([p["gamma"] for p in per]) / beta
        its = np.array([p["iterations"] for p in per], dtype=float)
        e_k = float(np.mean([abs(cfg.K - p["k_hat"]) for p in per]))
        mdp, fap = roc_per_trial(gammas, alphas, grid)
        B = "inf" if meth.bits is None else meth.bits
        L_I = meth.rows
        for k, tau in enumerate(grid):
            rows.append(_row(cfg, meth.label, B, tau, L_I=L_I, mdp=mdp[:, k].mean(),
                             fap=fap[:, k].mean(), mdp_se=standard_error(mdp[:, k]),
                             fap_se=standard_error(fap[:, k]), e_k=e_k, iterations_mean=its.mean()))
        m, se, tau, per_trial = mdp_at_fap(mdp, fap, grid)
        rows.append(_row(cfg, f"{meth.label}@fap", B, tau, L_I=L_I, mdp=m, fap=TARGET_FAP,
                         mdp_se=se, e_k=e_k, iterations_mean=its.mean()))
        # point metric at the default threshold beta / 2
        point = np.array([detection_errors(g > 0.5, a) for g, a in zip(gammas, alphas)])
        summary[meth.label] = {
            "mdp_at_fap": m, "mdp_at_fap_se": se, "threshold_at_fap": tau, "per_trial": per_trial,
            "iterations": its, "converged": np.array([p["converged"] for p in per]),
            "e_k": e_k, "k_hat": np.array([p["k_hat"] for p in per]),
            "mdp_curve": mdp.mean(axis=0), "fap_curve": fap.mean(axis=0),
            "point_mdp": float(point[:, 0].mean()), "point_fap": float(point[:, 1].mean()),
        }
    return MetricsRecord(cfg, rows, summary)


def run_detection_experiment(cfg: ExperimentConfig, workers: int = 1) -> MetricsRecord:
    """Detection ROC per method, common random numbers across methods."""
    start = time.perf_counter()
    results = run_trials(cfg, "detect", workers)
    record = _detection_record(cfg, results, detection_methods(cfg))
    record.wall_clock = time.perf_counter() - start
    return record


def run_protocol_experiment(cfg: ExperimentConfig, workers: int = 1) -> MetricsRecord:
    """Two-phase protocol against Benchmark 1 (K known) and Benchmark 2
    (K fixed at the initial guess), both with the full preamble length."""
    if cfg.experiment != "protocol":
        cfg = cfg.replace(experiment="protocol")
    record = run_detection_experiment(cfg, workers)
    for b in cfg.bits:
        tag = "inf" if b is None else b
        proto = record.summary[f"protocol[B={tag}]"]
        for bench in ("benchmark1", "benchmark2"):
            other = record.summary[f"{bench}[B={tag}]"]
            proto[f"ratio_vs_{bench}"] = (proto["mdp_at_fap"] / other["mdp_at_fap"]
                                          if other["mdp_at_fap"] > 0 else math.inf)
        proto["p_value_vs_benchmark2"] = paired_one_sided(
            record.summary[f"benchmark2[B={tag}]"]["per_trial"], proto["per_trial"])
    return record


def run_kestimation_experiment(cfg: ExperimentConfig, workers: int = 1) -> MetricsRecord:
    """E_K per PEA step (and OEA per symbol budget) for each initial value."""
    if cfg.experiment != "estimate-k":
        cfg = cfg.replace(experiment="estimate-k")
    start = time.perf_counter()
    results = run_trials(cfg, "estimate", workers)
    rows, summary = [], {}
    for label in results[0]:
        k_hats = np.array([r[label][0] for r in results])
        inner = np.array([r[label][1] for r in results], dtype=float)
        err = np.abs(k_hats - cfg.K)
        e_k = err.mean(axis=0)
        for i in range(err.shape[1]):
            rows.append(_row(cfg, label, cfg.phase1_bits, i, e_k=e_k[i],
                             iterations_mean=inner[:, i - 1].mean() if i else None))
        summary[label] = {"e_k": e_k, "e_k_se": np.array([standard_error(c) for c in err.T]),
                          "errors": err, "k_hats": k_hats}
    return MetricsRecord(cfg, rows, summary, time.perf_counter() - start)


def run_convergence_experiment(cfg: ExperimentConfig, workers: int = 1) -> MetricsRecord:
    """Mean delta = ||gamma_i - gamma*||_1 / N per iteration, gamma* the final iterate."""
    if cfg.experiment != "converge":
        cfg = cfg.replace(experiment="converge")
    start = time.perf_counter()
    results = run_trials(cfg, "converge", workers)
    rows, summary = [], {}
    for b in cfg.bits:
        label = f"converge[B={'inf' if b is None else b}]"
        per = [r["methods"][label] for r in results]
        its = np.array([p["iterations"] for p in per], dtype=float)
        length = max(p["delta"].size for p in per)
        # a finished run sits at its final iterate, so its delta stays 0
        deltas = np.zeros((len(per), length))
        for k, p in enumerate(per):
            deltas[k, :p["delta"].size] = p["delta"]
        mean_delta = deltas.mean(axis=0)
        for i in range(length):
            rows.append(_row(cfg, label, "inf" if b is None else b, i, iterations_mean=its.mean(),
                             delta=mean_delta[i]))
        summary[label] = {"iterations": its, "delta": mean_delta,
                          "converged": np.array([p["converged"] for p in per])}
    return MetricsRecord(cfg, rows, summary, time.perf_counter() - start)


RUNNERS = {
    "detect": run_detection_experiment,
    "protocol": run_protocol_experiment,
    "estimate-k": run_kestimation_experiment,
    "converge": run_convergence_experiment,
}


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> MetricsRecord:
    return RUNNERS[cfg.experiment](cfg, workers)


# ---------------------------------------------------------------------------
# CSV


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return _fmt_float(v) if math.isinf(v) else format(v, ".10g")
    return str(value)


def csv_text(record: MetricsRecord) -> str:
    buf = io.StringIO()
    for line in config_to_lines(record.config):
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in record.rows:
        writer.writerow([_cell(row.get(col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def emit_csv(record: MetricsRecord, path) -> None:
    """Write the config as ``# key = value`` comments, then the CSV rows.

    Wall-clock time is deliberately left out so reruns are byte-identical.
    """
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(record))
