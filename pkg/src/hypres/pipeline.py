"""Batch pipeline: configuration, cached stages, and artifact files.

Stages run in dependency order (terms -> couplings -> scan -> sample ->
fit -> xsec); each writes one or more text artifacts whose headers record
the digest of the configuration (and of the input files) that produced
them.  A stage is skipped when its outputs exist with matching digests and
refuses to consume stale inputs.

The configuration is one INI-style file with a section per stage; the
defaults reproduce the full three-body run (131x61 basis grid, 6 retained
channels, rho in [0.05, 500]) so a config that only names the system is
complete.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adiabatic import (
    HyperangularGrid,
    geometric_rho_grid,
    refine_rho_grid,
    solve_terms,
    solve_with_couplings,
)
from .algebra import cross_sections
from .breit_wigner import BWPoleParams, bw_k, resonance_from_pole
from .channels import ChannelSet, ThreeBodyMasses
from .errors import CacheError, ConfigError, StageError
from .fitting import FitProblem, compare_models, fit
from .models import BoxMode, TwoChannelToy
from .radial import RadialProblem, build_grid
from .samples import read_samples, write_samples
from .scan import ScanConfig, detect_resonances, sample_k, scan_branches
from .tableio import (
    digest_file,
    digest_text,
    load_couplings,
    read_keyvalues,
    read_table,
    save_couplings,
    save_terms,
    write_keyvalues,
    write_table,
)

STAGES = ("terms", "couplings", "scan", "sample", "fit", "xsec")

DEFAULTS = {
    "system": {
        "kind": "three-body",
        "m1": "26.584935828866946",
        "m2": "17.75167309872182",
        "z1": "1",
        "z2": "1",
        "z_light": "-1",
    },
    "basis": {
        "n_chi": "131",
        "n_theta": "61",
        "n_terms": "6",
        "rho_min": "0.05",
        "rho_max": "500.0",
        "n_rho": "400",
        "n_refine": "80",
        "n_workers": "1",
    },
    "radial": {
        "rho_start": "0.05",
        "rho_match": "500.0",
        "h_max": "0.05",
        "include_rho_term": "true",
    },
    "scan": {
        "alpha_min": "50.0",
        "alpha_max": "400.0",
        "alpha_step": "1.0",
        "n_levels": "12",
        "sigma": "",
        "e_min": "",
        "e_max": "",
        "halfwidth": "8.0",
        "max_samples": "400",
        "plateau_fraction": "0.05",
    },
    "fit": {
        "model": "general",
        "weighting": "relative",
    },
    "xsec": {
        "n_points": "201",
        "span_widths": "8.0",
    },
    "output": {
        "directory": "out",
    },
    "toy": {},
    "box": {},
}


@dataclass
class RunConfig:
    """Parsed configuration plus the canonical text it hashes to."""

    parser: configparser.ConfigParser
    path: str = "<defaults>"

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = _fresh_parser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        return cls(parser=parser, path=str(path))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = _fresh_parser()
        parser.read_string(text)
        return cls(parser=parser, path="<text>")

    def get(self, section: str, key: str, cast=str):
        try:
            raw = self.parser.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError) as exc:
            raise ConfigError(f"missing [{section}] {key}") from exc
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)

    def get_optional(self, section: str, key: str, cast=float):
        try:
            raw = self.parser.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError):
            return None
        raw = raw.strip()
        return cast(raw) if raw else None

    def canonical(self, sections) -> str:
        """Normalized text of the given sections (for digests)."""
        buf = io.StringIO()
        for sec in sections:
            buf.write(f"[{sec}]\n")
            if self.parser.has_section(sec):
                for key in sorted(self.parser.options(sec)):
                    buf.write(f"{key} = {self.parser.get(sec, key)}\n")
        return buf.getvalue()

    def digest(self, sections) -> str:
        return digest_text(self.canonical(sections))

    @property
    def kind(self) -> str:
        return self.get("system", "kind")

    def out_dir(self) -> Path:
        d = Path(self.get("output", "directory"))
        d.mkdir(parents=True, exist_ok=True)
        return d

    def masses(self) -> ThreeBodyMasses:
        return ThreeBodyMasses(
            m1=self.get("system", "m1", float),
            m2=self.get("system", "m2", float),
            z1=self.get("system", "z1", int),
            z2=self.get("system", "z2", int),
            z_light=self.get("system", "z_light", int),
        )

    def toy(self) -> TwoChannelToy:
        kwargs = {}
        if self.parser.has_section("toy"):
            for key in self.parser.options("toy"):
                kwargs[key] = self.parser.getfloat("toy", key)
        return TwoChannelToy(**kwargs)

    def box(self) -> BoxMode:
        kwargs = {}
        if self.parser.has_section("box"):
            for key in self.parser.options("box"):
                kwargs[key] = self.parser.getfloat("box", key)
        return BoxMode(**kwargs)


def _fresh_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.read_dict(DEFAULTS)
    return parser


# --------------------------------------------------------------------------
# stage plumbing


def _check_cache(path: Path, expect: dict) -> bool:
    """True when path exists and its header matches every expected value."""
    if not path.exists():
        return False
    try:
        _, meta = read_table(path)
    except Exception:
        try:
            _, meta = read_keyvalues(path)
        except Exception:
            return False
    return all(meta.get(k) == v for k, v in expect.items())


def _require_fresh(path: Path, expect: dict, producer: str):
    if not path.exists():
        raise CacheError(f"missing {path.name}; run the '{producer}' stage first")
    ok = _check_cache(path, expect)
    if not ok:
        raise CacheError(
            f"stale cache {path.name} (config changed); rerun '{producer}'"
        )


def _sections_for(stage: str, kind: str):
    base = {"terms": ["system", "basis"], "couplings": ["system", "basis"]}
    if kind == "toy":
        base = {"terms": ["system", "toy"], "couplings": ["system", "toy"]}
    if kind == "box":
        base = {"terms": ["system", "box"], "couplings": ["system", "box"]}
    table = {
        "terms": base["terms"],
        "couplings": base["couplings"],
        "scan": base["couplings"] + ["radial", "scan"],
        "sample": base["couplings"] + ["radial", "scan"],
        "fit": ["fit"],
        "xsec": ["xsec"],
    }
    return table[stage]


def _rho_grid(config: RunConfig):
    return geometric_rho_grid(
        config.get("basis", "rho_min", float),
        config.get("basis", "rho_max", float),
        config.get("basis", "n_rho", int),
    )


def _analytic_tables(config: RunConfig):
    kind = config.kind
    if kind == "toy":
        toy = config.toy()
        return toy.tables()
    if kind == "box":
        box = config.box()
        rho = np.linspace(box.rho_start, box.rho_match, 400)
        eps = np.full((rho.size, 1), box.offset)
        zeros = np.zeros((rho.size, 1, 1))
        return rho, eps, zeros, zeros
    raise ConfigError(f"no analytic tables for kind={kind!r}")


def stage_terms(config: RunConfig, force: bool = False) -> Path:
    """Adiabatic terms table (Fig.-1-style data)."""
    out = config.out_dir() / "terms.dat"
    expect = {"config-digest": config.digest(_sections_for("terms", config.kind))}
    if not force and _check_cache(out, expect):
        return out
    if config.kind == "three-body":
        grid = HyperangularGrid(
            n_chi=config.get("basis", "n_chi", int),
            n_theta=config.get("basis", "n_theta", int),
        )
        rho_grid = _rho_grid(config)
        sol = solve_terms(
            config.masses(), grid, rho_grid,
            config.get("basis", "n_terms", int),
            keep_basis=False,
            n_workers=config.get("basis", "n_workers", int),
        )
        save_terms(out, sol, {"config-digest": expect["config-digest"]})
    else:
        rho, eps, _, _ = _analytic_tables(config)
        rows = np.hstack([rho[:, None], eps])
        write_table(
            out, rows,
            {"n_terms": eps.shape[1], "kind": config.kind,
             "config-digest": expect["config-digest"]},
            "rho eps_1..eps_N",
        )
    return out


def stage_couplings(config: RunConfig, force: bool = False) -> Path:
    """Terms plus H/Q coupling tables (the radial-stage input contract)."""
    out = config.out_dir() / "couplings.dat"
    expect = {"config-digest": config.digest(_sections_for("couplings", config.kind))}
    if not force and _check_cache(out, expect):
        return out
    if config.kind == "three-body":
        grid = HyperangularGrid(
            n_chi=config.get("basis", "n_chi", int),
            n_theta=config.get("basis", "n_theta", int),
        )
        rho_grid = _rho_grid(config)
        n_terms = config.get("basis", "n_terms", int)
        n_workers = config.get("basis", "n_workers", int)
        n_refine = config.get("basis", "n_refine", int)
        if n_refine > 0:
            coarse = solve_terms(
                config.masses(), grid, rho_grid, n_terms,
                keep_basis=False, n_workers=n_workers,
            )
            rho_grid = refine_rho_grid(rho_grid, coarse.terms, n_refine)
        sol = solve_with_couplings(
            config.masses(), grid, rho_grid, n_terms, n_workers=n_workers
        )
        save_couplings(out, sol, {"config-digest": expect["config-digest"]})
    else:
        rho, eps, h, q = _analytic_tables(config)
        n = eps.shape[1]
        rows = np.hstack(
            [rho[:, None], eps, h.reshape(rho.size, n * n),
             q.reshape(rho.size, n * n)]
        )
        write_table(
            out, rows,
            {"n_terms": n, "kind": config.kind,
             "config-digest": expect["config-digest"]},
            "rho eps_1..eps_N H_11..H_NN(row-major) Q_11..Q_NN(row-major)",
        )
    return out


def _radial_problem(config: RunConfig):
    path = config.out_dir() / "couplings.dat"
    expect = {"config-digest": config.digest(_sections_for("couplings", config.kind))}
    _require_fresh(path, expect, "couplings")
    rho, eps, h, q, _ = load_couplings(path)
    kind = config.kind
    if kind == "three-body":
        rho_start = config.get("radial", "rho_start", float)
        rho_match = config.get("radial", "rho_match", float)
        include = config.get("radial", "include_rho_term", bool)
    elif kind == "toy":
        toy = config.toy()
        rho_start, rho_match, include = toy.rho_start, toy.rho_match, False
    else:
        box = config.box()
        rho_start, rho_match, include = box.rho_start, box.rho_match, False
    problem = RadialProblem.from_tables(
        rho, eps, h, q,
        rho_start=rho_start, rho_match=rho_match, include_rho_term=include,
    )
    return problem, digest_file(path)


def _scan_config(config: RunConfig, problem) -> ScanConfig:
    e_min = config.get_optional("scan", "e_min")
    if e_min is None:
        # default to the two-open-channel regime of the 2x2 sample contract
        thr = np.sort(problem.thresholds)
        e_min = float(thr[min(1, thr.size - 1)]) + 1e-9
    return ScanConfig(
        alpha_min=config.get("scan", "alpha_min", float),
        alpha_max=config.get("scan", "alpha_max", float),
        alpha_step=config.get("scan", "alpha_step", float),
        n_levels=config.get("scan", "n_levels", int),
        sigma=config.get_optional("scan", "sigma"),
        e_min=e_min,
        e_max=config.get_optional("scan", "e_max"),
        energy_window_halfwidth=config.get("scan", "halfwidth", float),
        max_samples=config.get("scan", "max_samples", int),
        plateau_slope_fraction=config.get("scan", "plateau_fraction", float),
    )


def stage_scan(config: RunConfig, force: bool = False) -> Path:
    """Box-size scan: branch table plus detected resonance windows."""
    out_b = config.out_dir() / "branches.dat"
    out_w = config.out_dir() / "windows.dat"
    problem, in_digest = _radial_problem(config)
    expect = {
        "config-digest": config.digest(_sections_for("scan", config.kind)),
        "input-digest": in_digest,
    }
    if not force and _check_cache(out_b, expect) and _check_cache(out_w, expect):
        return out_w
    cfg = _scan_config(config, problem)
    h_max = config.get("radial", "h_max", float)
    grid = build_grid(
        problem, rho_end=max(cfg.alpha_max, problem.rho_match), h_max=h_max
    )
    spectrum = scan_branches(problem, cfg, grid=grid)
    rows = np.hstack([spectrum.alpha_grid[:, None], spectrum.levels])
    write_table(
        out_b, rows,
        dict(expect, n_branches=spectrum.n_branches,
             monotone_defect=f"{spectrum.monotone_defect():.3e}"),
        "alpha Lambda_1..Lambda_n",
    )
    windows = detect_resonances(spectrum, cfg, thresholds=problem.thresholds)
    wrows = []
    for i, w in enumerate(windows):
        for e, (alpha, branch) in zip(w.energies, w.provenance):
            wrows.append(
                [i, w.e_center, w.gamma_est, w.slope, w.alpha_at, e, alpha, branch]
            )
    write_table(
        out_w,
        np.asarray(wrows) if wrows else np.empty((0, 8)),
        dict(expect, n_windows=len(windows)),
        "window e_center gamma_est slope alpha_at E alpha branch",
    )
    return out_w


def load_windows(path):
    rows, meta = read_table(path)
    windows = []
    n = int(meta.get("n_windows", 0))
    for i in range(n):
        sel = rows[rows[:, 0] == i]
        windows.append(
            dict(
                e_center=float(sel[0, 1]),
                gamma_est=float(sel[0, 2]),
                slope=float(sel[0, 3]),
                alpha_at=float(sel[0, 4]),
                energies=sel[:, 5],
                provenance=[(float(a), int(b)) for a, b in sel[:, 6:8]],
            )
        )
    return windows, meta


def stage_sample(config: RunConfig, resonance: int = 0, force: bool = False) -> Path:
    """K(E) samples at the stabilization energies of one detected window."""
    out = config.out_dir() / f"ksamples_{resonance}.dat"
    problem, in_digest = _radial_problem(config)
    expect = {
        "config-digest": config.digest(_sections_for("sample", config.kind)),
        "input-digest": in_digest,
        "resonance": str(resonance),
    }
    if not force and _check_cache(out, expect):
        return out
    win_path = config.out_dir() / "windows.dat"
    scan_expect = {
        "config-digest": config.digest(_sections_for("scan", config.kind)),
        "input-digest": in_digest,
    }
    _require_fresh(win_path, scan_expect, "scan")
    windows, _ = load_windows(win_path)
    if not windows:
        raise StageError("no resonance windows detected by the scan stage")
    if not 0 <= resonance < len(windows):
        raise StageError(
            f"resonance index {resonance} out of range (found {len(windows)})"
        )
    win = windows[resonance]
    from .scan import ResonanceWindow

    window = ResonanceWindow(
        e_center=win["e_center"], gap=0.0, slope=win["slope"],
        alpha_at=win["alpha_at"], branch=0,
        energies=np.asarray(win["energies"]),
        provenance=tuple(win["provenance"]), gamma_est=win["gamma_est"],
    )
    h_max = config.get("radial", "h_max", float)
    grid = build_grid(problem, rho_end=problem.rho_match, h_max=h_max)
    samples = sample_k(problem, window, grid=grid)
    header = [f"{k}: {v}" for k, v in expect.items()]
    header.append(f"e_center: {win['e_center']:.17e}")
    header.append(f"gamma_est: {win['gamma_est']:.6e}")
    write_samples(out, samples, header_lines=header)
    return out


def _fit_weights(samples, mode: str):
    if mode == "uniform":
        return None
    if mode == "relative":
        norms = [
            max(1e-6, s.k11 ** 2 + 2.0 * s.k12 ** 2 + s.k22 ** 2) for s in samples
        ]
        return tuple(1.0 / n for n in norms)
    raise ConfigError(f"unknown weighting {mode!r}")


def _report_pairs(result, prefix=""):
    rep = result.report
    p = result.params
    pairs = {
        f"{prefix}model": result.model,
        f"{prefix}E1": p.E1,
        f"{prefix}a1": p.a1,
        f"{prefix}a2": p.a2,
        f"{prefix}a": p.a,
        f"{prefix}b1": p.b1,
        f"{prefix}b2": p.b2,
        f"{prefix}b": p.b,
        f"{prefix}rank_defect": result.rank_defect,
        f"{prefix}residual": result.residual,
        f"{prefix}iterations": result.iterations,
        f"{prefix}weight_mode": result.weight_mode,
        f"{prefix}E0": rep.E0,
        f"{prefix}Gamma": rep.Gamma,
        f"{prefix}Gamma1": rep.partial_widths[0],
        f"{prefix}Gamma2": rep.partial_widths[1],
        f"{prefix}branching1": rep.branching[0],
        f"{prefix}branching2": rep.branching[1],
        f"{prefix}Delta1": rep.eigenphases[0],
        f"{prefix}Delta2": rep.eigenphases[1],
        f"{prefix}mixing_nu": rep.mixing_angle,
        f"{prefix}beta_tilde1": rep.beta_tilde[0],
        f"{prefix}beta_tilde2": rep.beta_tilde[1],
        f"{prefix}degenerate_background": rep.degenerate_background,
        f"{prefix}ill_conditioned_background": rep.ill_conditioned_background,
    }
    return pairs


def stage_fit(config: RunConfig, resonance: int = 0, model: str | None = None,
              force: bool = False) -> Path:
    """Pole-form fit of the sampled K(E); writes the resonance report."""
    out = config.out_dir() / f"fit_{resonance}.txt"
    sample_path = config.out_dir() / f"ksamples_{resonance}.dat"
    problem, in_digest = _radial_problem(config)
    sample_expect = {
        "config-digest": config.digest(_sections_for("sample", config.kind)),
        "input-digest": in_digest,
        "resonance": str(resonance),
    }
    _require_fresh(sample_path, sample_expect, "sample")
    model = model or config.get("fit", "model")
    expect = {
        "config-digest": config.digest(_sections_for("fit", config.kind)),
        "input-digest": digest_file(sample_path),
        "model": model,
    }
    if not force and _check_cache(out, expect):
        return out
    samples = read_samples(sample_path)
    weights = _fit_weights(samples, config.get("fit", "weighting"))
    upper = float(np.max(problem.thresholds[problem.thresholds < np.inf]))

    if model == "both":
        comparison = compare_models(samples, weights=weights)
        pairs = _report_pairs(comparison.general)
        pairs.update(_report_pairs(comparison.diagonal, prefix="diagonal_"))
        pairs["residual_ratio"] = comparison.residual_ratio
        pairs["branching_shift"] = comparison.branching_shift
        best = comparison.general
    else:
        problem_fit = FitProblem(
            samples=tuple(samples), weights=weights, model=model
        )
        best = fit(problem_fit)
        pairs = _report_pairs(best)
    pairs["E0_below_upper_threshold"] = upper - best.report.E0
    pairs["minus_E0"] = -best.report.E0
    pairs["Gamma2_over_Gamma"] = best.report.branching[1]
    write_keyvalues(out, pairs, header=expect)
    # Table-shaped summary row on stdout is the CLI's job; keep data pure.
    return out


def stage_xsec(config: RunConfig, resonance: int = 0, force: bool = False):
    """Profile files: sampled K entries, inverse resonant parts, and the
    model cross sections on a uniform grid across the window."""
    out_k = config.out_dir() / f"profiles_k_{resonance}.dat"
    out_i = config.out_dir() / f"profiles_invk_{resonance}.dat"
    out_x = config.out_dir() / f"profiles_xsec_{resonance}.dat"
    fit_path = config.out_dir() / f"fit_{resonance}.txt"
    sample_path = config.out_dir() / f"ksamples_{resonance}.dat"
    if not fit_path.exists():
        raise CacheError(f"missing {fit_path.name}; run the 'fit' stage first")
    pairs, fit_meta = read_keyvalues(fit_path)
    expect = {
        "config-digest": config.digest(_sections_for("xsec", config.kind)),
        "input-digest": digest_file(fit_path),
    }
    if (not force and _check_cache(out_k, expect)
            and _check_cache(out_i, expect) and _check_cache(out_x, expect)):
        return out_x
    samples = read_samples(sample_path)
    params = BWPoleParams.from_amplitudes(
        E1=pairs["E1"], a1=pairs["a1"], a2=pairs["a2"], a=pairs["a"],
        beta1=math.sqrt(pairs["b1"]),
        beta2=math.copysign(math.sqrt(pairs["b2"]), pairs["b"] or 1.0),
    )
    rows_k = [[s.energy, s.k11, s.k12, s.k22] for s in samples]
    write_table(out_k, rows_k, dict(expect), "E K11 K12 K22")
    rows_i = []
    for s in samples:
        d11 = s.k11 - pairs["a1"]
        d12 = s.k12 - pairs["a"]
        d22 = s.k22 - pairs["a2"]
        if min(abs(d11), abs(d12), abs(d22)) == 0.0:
            continue
        rows_i.append([s.energy, 1.0 / d11, 1.0 / d12, 1.0 / d22])
    write_table(
        out_i, rows_i, dict(expect),
        "E 1/(K11-a1) 1/(K12-a) 1/(K22-a2)",
    )

    channels = _channel_set(config)
    gamma = pairs["Gamma"]
    e0 = pairs["E0"]
    span = config.get("xsec", "span_widths", float) * gamma
    n_pts = config.get("xsec", "n_points", int)
    lo = max(e0 - span, float(np.max(channels.thresholds)) + 1e-9)
    hi = e0 + span
    if hi <= lo:
        raise StageError(
            f"cross-section range [{lo}, {hi}] empty: E below both thresholds"
        )
    rows_x = []
    for e in np.linspace(lo, hi, n_pts):
        if e == params.E1:
            continue
        sigma = cross_sections(bw_k(params, float(e)), channels)
        rows_x.append([e, sigma[0, 0], sigma[0, 1], sigma[1, 1]])
    write_table(out_x, rows_x, dict(expect), "E sigma11 sigma12 sigma22")
    return out_x


def _channel_set(config: RunConfig) -> ChannelSet:
    kind = config.kind
    if kind == "three-body":
        return config.masses().channel_set()
    if kind == "toy":
        toy = config.toy()
        # plain Schroedinger units: k = q, so 2 mu = 1
        return ChannelSet(
            thresholds=tuple(toy.thresholds), reduced_masses=(0.5, 0.5)
        )
    raise ConfigError(f"no channel set for kind={kind!r}")


def run_pipeline(config: RunConfig, resonance: int = 0, model: str | None = None,
                 force: bool = False, upto: str | None = None):
    """Stages in dependency order, optionally stopping after `upto`.

    Returns the path of the last artifact written.
    """
    if upto is not None and upto not in STAGES:
        raise ConfigError(f"unknown stage {upto!r}")
    last = STAGES.index(upto) if upto else len(STAGES) - 1
    path = stage_terms(config, force=force)
    steps = [
        lambda: stage_couplings(config, force=force),
        lambda: stage_scan(config, force=force),
        lambda: stage_sample(config, resonance=resonance, force=force),
        lambda: stage_fit(config, resonance=resonance, model=model, force=force),
        lambda: stage_xsec(config, resonance=resonance, force=force),
    ]
    for i, step in enumerate(steps, start=1):
        if i > last:
            break
        path = step()
    return path
