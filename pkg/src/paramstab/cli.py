"""Command line entry point: ``paramstab run --config PATH`` and ``paramstab catalog``.

Exit codes: 0 all audits pass, 1 an audit failed, 2 usage/config error,
3 engine error.
"""

import argparse
import math
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__
from .catalog import family_specs
from .coefficients import (KERNELS, CoefficientSet, PerturbationFamily, SamplingPlan, assumption_report,
                           delta_metrics, from_profiles, profile_diffusion, profile_drift, sup_norm)
from .config import ConfigError, ExperimentConfig, load_config
from .errors import ParamstabError, TruncationFailure
from .gaussian_core import ConcentrationProfile, GaussianRef
from .oracles import (PAYOFFS, DensityGrid, chain_density_grid, compare_densities, grid_chapman_kolmogorov, mc_density,
                      ordered_map, price_sensitivity, rate_fit, sde_density_grid, stability_sweep)
from .parametrix_chain import ChainGrid, ChainModel, InnovationLaw, chain_density_parametrix
from .parametrix_sde import (ConvolutionScheme, TailBound, density_series, gaussian_upper_audit,
                             kernel_audit_grid, kernel_bound_audit, truncation_order)

EXIT_OK, EXIT_AUDIT, EXIT_CONFIG, EXIT_ENGINE = 0, 1, 2, 3
CLI_MAX_ORDER = 4


def fmt(v):
    if isinstance(v, str):
        return v
    return f"{float(v):.17g}"


def csv_text(header, rows):
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def point_str(p):
    p = np.atleast_1d(p)
    return ";".join(fmt(v) for v in p)


def density_csv(grid):
    rows = [(el, point_str(st), point_str(en), val, grid.provenance) for el, st, en, val in grid.rows()]
    return csv_text(["elapsed", "start", "end", "value", "provenance"], rows)


# ------------------------------------------------------------------ build


def estimate_constants(drift, diffusion, d, gamma, cfg: ExperimentConfig):
    """Sample sup bounds, ellipticity and the Holder constant on the probe domain."""
    probe = from_profiles(d, drift, diffusion, gamma=gamma, K1=math.inf, K2=math.inf,
                          Lambda=1.0, kappa=math.inf)
    rep = assumption_report(probe, cfg.time_grid, cfg.space_domain, SamplingPlan(points_per_axis=257 if d == 1 else 33))
    lam = max(1.0, rep.eig_max, 1.0 / rep.eig_min if rep.eig_min > 0 else math.inf)
    return {"K1": rep.drift_sup, "K2": rep.diffusion_sup, "Lambda": lam, "kappa": rep.diffusion_holder}


def build_set(cfg: ExperimentConfig, drift_ref=None) -> CoefficientSet:
    drift = (drift_ref or cfg.drift).profile()
    diffusion = cfg.diffusion.profile()
    d = cfg.dimension
    gamma = cfg.constants.get("gamma", max(min(diffusion.holder_exponent, 1.0), 0.05))
    consts = dict(cfg.constants)
    consts["gamma"] = gamma
    missing = [k for k in ("K1", "K2", "Lambda", "kappa") if k not in consts]
    if missing:
        est = estimate_constants(drift, diffusion, d, gamma, cfg)
        for k in missing:
            consts[k] = est[k]
    return from_profiles(d, drift, diffusion, name=f"{cfg.drift}/{cfg.diffusion}", **consts)


def build_scheme(cfg):
    sc = cfg.scheme
    return ConvolutionScheme(time_nodes=sc["time_nodes"], materialize_nodes=sc["materialize_nodes"],
                             space_box_halfwidth=sc["halfwidth"], space_nodes_per_axis=sc["space_nodes"])


def build_law(cfg):
    return InnovationLaw(cfg.law, cfg.M)


def chain_grid(cfg):
    return ChainGrid(halfwidth=cfg.scheme["halfwidth"], nodes_per_axis=cfg.scheme["chain_nodes"])


def ends_array(cfg):
    return np.asarray(cfg.ends, dtype=float).reshape(-1, cfg.dimension)


def choose_order(cfg, cs, manifest):
    """Configured R, or the tail-bound order for tol = tail_tol capped at 4."""
    if cfg.scheme["R"] is not None:
        return cfg.scheme["R"]
    if cs.dimension != 1:
        manifest["truncation.rule"] = "default (d = 2)"
        return 3
    span = cfg.window["t"] - cfg.window["s"]
    grid = kernel_audit_grid(cs, cfg.window["t"], span * np.array([1.0, 0.5, 0.25, 0.125]),
                             np.linspace(-4.0, 4.0, 17), np.linspace(-3.0, 3.0, 7))
    audit = kernel_bound_audit(cs, grid)
    manifest["fitted.c1"] = fmt(audit.c1)
    bound = TailBound.build(audit.c1, cs.gamma, span)
    try:
        R = truncation_order(bound, cfg.scheme["tail_tol"])
        manifest["truncation.rule"] = "tail-bound"
    except TruncationFailure as exc:
        manifest["truncation.rule"] = f"cap (tail {exc.achieved_tail:.3g})"
        R = CLI_MAX_ORDER
    return min(R, CLI_MAX_ORDER)


def perturbation_family(cfg, cs):
    p = cfg.perturbation
    d = cfg.dimension
    kind = p["kind"]
    if kind == "bump":
        return PerturbationFamily("bump", cs, function=profile_diffusion(p["function"].profile(), d))
    if kind == "drift-shift":
        prof = p["function"].profile()
        return PerturbationFamily("drift-shift", cs, function=profile_drift(prof, d),
                                  function_support_compact=prof.support is not None,
                                  function_breakpoints=prof.breakpoints)
    return PerturbationFamily("mollify", cs, kernel=KERNELS[p["kernel"]], target=p["target"])


def weight_for(cfg, cs):
    if cfg.law == "poly-tail" and (cfg.kind in ("chain-density", "chain-compare") or cfg.engine == "chain"):
        d = cfg.dimension
        return ConcentrationProfile(cfg.M - (d + 5 + cs.gamma), d, cs.c)
    return GaussianRef(cs.c, cfg.dimension)


# -------------------------------------------------------------- runners


def audit_assumptions(cfg, cs, audits, manifest):
    rep = assumption_report(cs, cfg.time_grid, cfg.space_domain)
    manifest["measured.eig_min"] = fmt(rep.eig_min)
    manifest["measured.eig_max"] = fmt(rep.eig_max)
    manifest["measured.diffusion_holder"] = fmt(rep.diffusion_holder)
    audits["assumptions"] = rep.passed


def run_sde_density(cfg, cs, out, audits, manifest, threads):
    s, t = cfg.window["s"], cfg.window["t"]
    ends = ends_array(cfg)
    R = choose_order(cfg, cs, manifest)
    manifest["truncation.R"] = str(R)
    scheme = build_scheme(cfg)
    res = density_series(cs, s, t, cfg.x, ends, R, scheme)
    grid = DensityGrid([t - s], np.reshape(cfg.x, (1, -1)), res.ys, res.value[None, None], "parametrix-sde",
                       scheme=f"R={R}")
    out["density.csv"] = density_csv(grid)
    up = gaussian_upper_audit(cs, s, t, cfg.x, ends, R, scheme, series=res)
    manifest["fitted.upper_ratio"] = fmt(up.ratio)
    audits["upper-bound-finite"] = up.finite
    audit_assumptions(cfg, cs, audits, manifest)
    if cfg.oracle["mc_paths"]:
        mc = mc_density(cs, s, t, cfg.x, ends, cfg.oracle["mc_paths"], seed=cfg.oracle["mc_seed"], threads=threads)
        out["mc.csv"] = density_csv(mc.grid)
        rows = [(el, point_str(st), point_str(en), se) for (el, st, en, _), se
                in zip(mc.grid.rows(), mc.grid.stderr.ravel())]
        out["mc_stderr.csv"] = csv_text(["elapsed", "start", "end", "stderr"], rows)
        z = np.abs(grid.values.ravel() - mc.grid.values.ravel()) / mc.grid.stderr.ravel()
        manifest["mc.max_abs_z"] = fmt(np.max(z))
        manifest["mc.bandwidth"] = fmt(mc.bandwidth)
        audits["mc-agreement"] = bool(np.all(z <= 3.0))


def _chain_model(cfg, cs):
    return ChainModel(cs, cfg.window["T"], cfg.window["N"], build_law(cfg))


def run_chain_density(cfg, cs, out, audits, manifest, threads):
    model = _chain_model(cfg, cs)
    i, j = cfg.window["i"], cfg.window["j"]
    grid = chain_density_grid(model, i, j, cfg.x, ends_array(cfg), chain_grid(cfg))
    out["density.csv"] = density_csv(grid)
    audits["values-finite"] = bool(np.all(np.isfinite(grid.values)))
    audit_assumptions(cfg, cs, audits, manifest)


def run_chain_compare(cfg, cs, out, audits, manifest, threads):
    model = _chain_model(cfg, cs)
    i, j = cfg.window["i"], cfg.window["j"]
    ends = ends_array(cfg)
    par = chain_density_parametrix(model, i, j, cfg.x, ends, chain_grid(cfg)).value
    ck = grid_chapman_kolmogorov(model, i, j, cfg.x, ends, nodes=cfg.scheme["ck_nodes"]).grid.values.ravel()
    gap = np.abs(par - ck)
    out["compare.csv"] = csv_text(["end", "parametrix", "grid_ck", "gap"],
                                  [(point_str(e), p, c, g) for e, p, c, g in zip(ends, par, ck, gap)])
    mode = int(np.argmax(ck))
    rel = gap[mode] / ck[mode]
    manifest["compare.mode_relative_gap"] = fmt(rel)
    manifest["compare.max_abs_gap"] = fmt(np.max(gap))
    audits["mode-relative"] = bool(rel <= cfg.oracle["rel_tol"])
    audits["max-absolute"] = bool(np.max(gap) <= cfg.oracle["abs_tol"])


def _sweep_rows(rep):
    return [(e, dm.delta_b_sup, dm.delta_b_lq, dm.delta_sigma_holder, g, r)
            for e, dm, g, r in zip(rep.epsilons, rep.delta, rep.sup_weighted_gap, rep.ratio)]


SWEEP_HEADER = ["epsilon", "delta_sup", "delta_lq", "delta_holder", "gap", "ratio"]


def run_perturb_sweep(cfg, cs, out, audits, manifest, threads):
    fam = perturbation_family(cfg, cs)
    ends = ends_array(cfg)
    if cfg.engine == "chain":
        T, N, i, j = cfg.window["T"], cfg.window["N"], cfg.window["i"], cfg.window["j"]
        law = build_law(cfg)
        grid = chain_grid(cfg)
        density = lambda c: chain_density_grid(ChainModel(c, T, N, law), i, j, cfg.x, ends, grid)
        times = [k * T / N for k in range(N)]
    else:
        s, t = cfg.window["s"], cfg.window["t"]
        R = choose_order(cfg, cs, manifest)
        manifest["truncation.R"] = str(R)
        scheme = build_scheme(cfg)
        density = lambda c: sde_density_grid(c, s, t, cfg.x, ends, R, scheme)
        times = cfg.time_grid
    rep = stability_sweep(fam, cfg.perturbation["epsilons"], density, weight_for(cfg, cs),
                          q=cfg.perturbation["q"], time_grid=times, space_domain=cfg.space_domain,
                          threads=threads, probe=f"x={cfg.x} ends={len(ends)} points")
    out["sweep.csv"] = csv_text(SWEEP_HEADER, _sweep_rows(rep))
    manifest["slope"] = fmt(rep.fit.slope)
    manifest["slope.residual"] = fmt(rep.fit.residual)
    manifest["fitted.C"] = fmt(rep.fitted_constant)
    manifest["ratio_spread"] = fmt(rep.ratio_spread)
    manifest["alpha_q"] = fmt(rep.alpha_q)
    expected = cfg.checks["expected_slope"]
    if expected is None and fam.kind in ("bump", "drift-shift"):
        expected = 1.0
    if expected is not None:
        audits["slope"] = abs(rep.fit.slope - expected) <= cfg.checks["slope_tol"]
    audits["ratio-spread"] = bool(rep.ratio_spread <= cfg.checks["ratio_spread_max"])


def run_mollify_sweep(cfg, cs, out, audits, manifest, threads):
    fam = perturbation_family(cfg, cs)
    target = cfg.perturbation["target"]
    d = cfg.dimension
    plan = SamplingPlan(points_per_axis=2001 if d == 1 else 101)
    t0 = cfg.time_grid[0]
    profiles = []
    if target in ("drift", "both"):
        profiles.append(cfg.drift.profile())
    if target in ("diffusion", "both"):
        profiles.append(cfg.diffusion.profile())
    order = min(p.holder_exponent for p in profiles)

    def one(eps):
        pert = fam.at(eps)
        gap = 0.0
        if target in ("drift", "both"):
            gap = max(gap, sup_norm(lambda x: cs.b(t0, x) - pert.b(t0, x), cfg.space_domain, plan, d))
        if target in ("diffusion", "both"):
            gap = max(gap, sup_norm(lambda x: cs.sigma(t0, x) - pert.sigma(t0, x), cfg.space_domain, plan, d))
        dm = delta_metrics((cs, pert), cfg.perturbation["q"], cfg.time_grid, cfg.space_domain,
                           difference_compact=fam.difference_compact)
        return dm, gap

    eps_list = cfg.perturbation["epsilons"]
    results = ordered_map(one, eps_list, threads)
    gaps = [g for _, g in results]
    ratios = [g / e ** order if order > 0 else g for e, g in zip(eps_list, gaps)]
    rows = [(e, dm.delta_b_sup, dm.delta_b_lq, dm.delta_sigma_holder, g, r)
            for e, (dm, g), r in zip(eps_list, results, ratios)]
    out["sweep.csv"] = csv_text(SWEEP_HEADER, rows)
    fit = rate_fit(eps_list, gaps)
    manifest["slope"] = fmt(fit.slope)
    manifest["slope.residual"] = fmt(fit.residual)
    manifest["expected_slope"] = fmt(order)
    expected = cfg.checks["expected_slope"] if cfg.checks["expected_slope"] is not None else order
    audits["slope"] = abs(fit.slope - expected) <= cfg.checks["slope_tol"]


def run_price_sensitivity(cfg, cs, out, audits, manifest, threads):
    fam = perturbation_family(cfg, cs)
    s, t = cfg.window["s"], cfg.window["t"]
    R = choose_order(cfg, cs, manifest)
    manifest["truncation.R"] = str(R)
    scheme = build_scheme(cfg)
    x = cfg.x[0]

    def one(eps):
        return price_sensitivity(fam, eps, cfg.payoff["id"], s, t, x, cfg.payoff["strike"], R, scheme,
                                 q=cfg.perturbation["q"], space_domain=cfg.space_domain)

    eps_list = cfg.perturbation["epsilons"]
    res = ordered_map(one, eps_list, threads)
    rows = [(e, r.price_base, r.price_perturbed, r.difference, r.delta_total, r.bound_integral, r.ratio)
            for e, r in zip(eps_list, res)]
    out["prices.csv"] = csv_text(["epsilon", "price_base", "price_perturbed", "difference", "delta_total",
                                  "bound_integral", "ratio"], rows)
    manifest["fitted.C"] = fmt(max(r.ratio for r in res))
    audits["ratio-finite"] = all(math.isfinite(r.ratio) for r in res)


RUNNERS = {
    "sde-density": run_sde_density,
    "chain-density": run_chain_density,
    "chain-compare": run_chain_compare,
    "perturb-sweep": run_perturb_sweep,
    "mollify-sweep": run_mollify_sweep,
    "price-sensitivity": run_price_sensitivity,
}


def run(config_path, out_dir="out", seed=None, threads=1, stream=sys.stderr):
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=stream)
        return EXIT_CONFIG
    if seed is not None:
        cfg.seed = seed
        cfg.oracle["mc_seed"] = seed
    manifest = {
        "kind": cfg.kind,
        "config_sha256": cfg.digest,
        "seed": str(cfg.seed),
        "paramstab_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "python_version": platform.python_version(),
    }
    out, audits = {}, {}
    t_start = time.perf_counter()
    try:
        cs = build_set(cfg)
        for key in ("gamma", "K1", "K2", "Lambda", "kappa"):
            manifest[f"constant.{key}"] = fmt(getattr(cs, key))
        manifest["wall_time.build"] = f"{time.perf_counter() - t_start:.3f}"
        t1 = time.perf_counter()
        RUNNERS[cfg.kind](cfg, cs, out, audits, manifest, max(1, threads))
        manifest["wall_time.engine"] = f"{time.perf_counter() - t1:.3f}"
    except (ParamstabError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"engine error in {cfg.kind}: {exc}", file=stream)
        return EXIT_ENGINE
    failed = sorted(k for k, v in audits.items() if not v)
    for k in sorted(audits):
        manifest[f"audit.{k}"] = "pass" if audits[k] else "fail"
    manifest["audits_failed"] = str(len(failed))
    os.makedirs(out_dir, exist_ok=True)
    for name in sorted(out):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(out[name])
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8", newline="\n") as fh:
        for k, v in manifest.items():
            fh.write(f"{k} = {v}\n")
    if failed:
        print(f"audit failure: {', '.join(failed)}", file=stream)
        return EXIT_AUDIT
    return EXIT_OK


def list_catalog():
    lines = ["coefficient families:"]
    for spec in family_specs():
        notes = []
        if spec.drift_only:
            notes.append("drift only")
        if spec.d1_only:
            notes.append("d=1 only")
        params = ", ".join(f"{k}={v:g}" for k, v in spec.defaults.items())
        tail = f" [{'; '.join(notes)}]" if notes else ""
        lines.append(f"  {spec.name}({params}): {spec.summary}{tail}")
    lines.append("perturbations:")
    lines.append("  bump: sigma + eps*function")
    lines.append("  mollify: convolution with kernel at scale eps (target drift|diffusion|both)")
    lines.append("  drift-shift: b + eps*function")
    lines.append("mollifier kernels:")
    for name in sorted(KERNELS):
        k = KERNELS[name]
        lines.append(f"  {name}: support [{k.support[0]:g}, {k.support[1]:g}]"
                     f"{' symmetric' if k.symmetric else ' one-sided'}")
    lines.append("payoffs:")
    for name, (summary, _) in PAYOFFS.items():
        lines.append(f"  {name}: {summary}")
    lines.append("innovation laws:")
    lines.append("  gaussian: standard normal (d in {1, 2})")
    lines.append("  poly-tail M=12: unit-variance (1+|z|^2)^(-M/2) profile, any M > 2d+5+gamma (d=1 only)")
    lines.append("experiment kinds:")
    lines.append("  sde-density, chain-density, perturb-sweep, mollify-sweep, chain-compare, price-sensitivity")
    return "\n".join(lines) + "\n"


def main(argv=None):
    parser = argparse.ArgumentParser(prog="paramstab", description="Parametrix densities and stability sweeps")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--threads", type=int, default=1)
    sub.add_parser("catalog", help="list coefficient families, perturbations, payoffs, laws")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "catalog":
        sys.stdout.write(list_catalog())
        return EXIT_OK
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("config error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.config, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
