"""Command-line interface: spectrum | invariants | verify | berezin | starcheck."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable

import numpy as np
from sqlalchemy.exc import SQLAlchemyError

from . import __version__, database
from .ballsolver import DtNMatrix, Potential, assemble_dtn, dtn_constant_oracle
from .berezin import (
    BlockOperator,
    D1,
    berezin_expansion_eigenvalue,
    berezin_kernel,
    berezin_transform,
    berezin_transform_quadrature,
    exact_composition_check,
    exp_symbol_recursion_residual,
    expansion_fit,
    fit_series,
    funk_hecke_eigenvalue,
    sample_symbols,
)
from .clusters import (
    ClusterSpectrum,
    MomentSeries,
    asymptotic_fit,
    averaged_spectrum,
    cluster_bound_check,
    full_spectrum_clusters,
    moments,
    route_agreement,
)
from .config import ExperimentConfig, apply_overrides, load_config
from .errors import ConfigError, DataQualityError, DomainError, PreconditionError, ResourceError
from .geodesics import W_field, gradient_inner, orbit_grid, random_orbits
from .harmonics import SphFunction, alpha_norms, quadrature_s2, synthesize
from .invariants import (
    Switches,
    SymbolJet,
    beta_predict,
    gamma_terms,
    matrix_element_prediction,
    odd_jet,
    odd_predict,
    symbol_jet,
)
from .models import ClusterRow, InvariantRow, MomentRow, Run
from .reports import write_csv, write_json

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_GUARD = 3

GUARD_ERRORS = (DataQualityError, ResourceError, DomainError, PreconditionError)


# ---------------------------------------------------------------------------
# Run ledger
# ---------------------------------------------------------------------------


class Ledger:
    """Records a command run in the SQLite ledger; failures are logged, never raised."""

    def __init__(self, enabled: bool = True, session_factory: Callable | None = None):
        self.enabled = enabled
        self._factory = session_factory
        self.run_id: int | None = None

    def _session(self):
        return (self._factory or database.SessionLocal)()

    def _guard(self, action: Callable) -> None:
        if not self.enabled:
            return
        try:
            action()
        except SQLAlchemyError as exc:
            logger.warning("Run ledger disabled after error: %s", exc)
            self.enabled = False

    def start(self, command: str, config: ExperimentConfig, switches: str, out_dir: Path) -> None:
        def action():
            if self._factory is None:
                database.init_db()
            with self._session() as s:
                run = Run(
                    command=command,
                    config_hash=config.config_hash(),
                    version=__version__,
                    switches=switches,
                    status="running",
                    out_dir=str(out_dir),
                )
                s.add(run)
                s.commit()
                self.run_id = run.id

        self._guard(action)

    def _add(self, rows: list) -> None:
        if self.run_id is None or not rows:
            return

        def action():
            with self._session() as s:
                s.add_all(rows)
                s.commit()

        self._guard(action)

    def clusters(self, spec: ClusterSpectrum) -> None:
        self._add([ClusterRow(run_id=self.run_id, k=k, j=j, mu=mu) for k, j, mu in spec.rows()])

    def moments(self, series: MomentSeries) -> None:
        self._add([MomentRow(run_id=self.run_id, phi=series.phi, k=k, value=v) for k, v in series.rows()])

    def invariants(self, rows: list[dict]) -> None:
        self._add(
            [
                InvariantRow(
                    run_id=self.run_id,
                    **{key: row[key] for key in ("phi", "order", "predicted", "fitted", "abs_error", "rel_error", "condition", "passed")},
                )
                for row in rows
            ]
        )

    def finish(self, exit_code: int) -> None:
        if self.run_id is None:
            return

        def action():
            with self._session() as s:
                run = s.get(Run, self.run_id)
                run.exit_code = exit_code
                run.status = "passed" if exit_code == EXIT_PASS else "failed"
                run.finished_at = datetime.utcnow()
                s.commit()

        self._guard(action)


# ---------------------------------------------------------------------------
# Shared steps
# ---------------------------------------------------------------------------


@dataclass
class CommandContext:
    config: ExperimentConfig
    out: Path
    ledger: Ledger
    config_hash: str = ""
    switches: str = ""

    def __post_init__(self) -> None:
        self.config_hash = self.config.config_hash()
        self.switches = "scan" if self.config.scan_conventions else self.config.switches.label()

    def csv(self, name: str, columns, rows) -> Path:
        return write_csv(self.out / name, columns, rows, self.config_hash, self.switches)

    def json(self, name: str, payload: dict) -> Path:
        return write_json(self.out / name, payload, self.config_hash, self.switches)


def _is_odd(q: Potential) -> bool:
    return q.restriction_odd and not q.is_zero


def _alpha(config: ExperimentConfig, q: Potential) -> int:
    if config.alpha is not None:
        return config.alpha
    return 2 if _is_odd(q) else 1


def _assemble(ctx: CommandContext, q: Potential) -> DtNMatrix:
    config = ctx.config
    dtn = assemble_dtn(q, config.L_max, J=config.J, tol=config.neumann_tol, workers=config.threads)
    dtn.save(ctx.out / "dtn.bin", ctx.config_hash, ctx.switches)
    return dtn


def _switch_list(config: ExperimentConfig) -> list[Switches]:
    return list(Switches.scan()) if config.scan_conventions else [config.switches]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_spectrum(ctx: CommandContext) -> bool:
    """DtN matrix, cluster CSV and localization-bound report."""
    config = ctx.config
    q = config.build_potential()
    dtn = _assemble(ctx, q)
    spec = full_spectrum_clusters(dtn, _alpha(config, q), config.k_min, config.k_max)
    constant = q.constant_value()
    if constant is not None and constant > 0:
        oracle = {k: dtn_constant_oracle(constant, k) - k for k in spec.ks}
        ctx.csv("spectrum.csv", ("k", "j", "mu", "oracle"), ((k, j, mu, oracle[k]) for k, j, mu in spec.rows()))
        deviation = max(abs(mu - oracle[k]) for k, _, mu in spec.rows()) if spec.ks else 0.0
    else:
        ctx.csv("spectrum.csv", ("k", "j", "mu"), spec.rows())
        deviation = None
    bound = cluster_bound_check(dtn)
    ctx.json(
        "bound.json",
        {
            "bound": bound.to_dict(),
            "widths": {str(k): w for k, w in spec.scaled_widths().items()},
            "oracle_max_deviation": deviation,
            "neumann": {"J": dtn.J, "residual": dtn.residual, "flagged": dtn.flagged},
        },
    )
    ctx.ledger.clusters(spec)
    return bound.passed


def _jet_csv(ctx: CommandContext, name: str, fields: dict[str, SphFunction]) -> None:
    mus = orbit_grid(ctx.config.quadrature.orbit_grid)
    columns = ("mu1", "mu2", "mu3") + tuple(fields)
    values = {key: synthesize(f, mus).real for key, f in fields.items()}
    rows = (tuple(float(v) for v in mu) + tuple(float(values[key][i]) for key in fields) for i, mu in enumerate(mus))
    ctx.csv(name, columns, rows)


def _predict(ctx: CommandContext, q: Potential, switches: Switches, w_cache: dict):
    """Symbol jet and invariant reports for every configured test function under one switch setting."""
    config = ctx.config
    sizes = config.quadrature
    if config.include_w and "W" not in w_cache:
        L = sizes.jet_L or 2 * q.max_degree + 4
        w_cache["W"] = W_field(q, L, Nt=sizes.Nt, Ns=sizes.Ns, workers=config.threads) if q.constant_value() is None else None
    w = w_cache.get("W")
    phis = config.build_test_functions()
    if _is_odd(q):
        jet = odd_jet(q, sizes.jet_L, switches, config.include_w, sizes.Nt, sizes.Ns, config.threads, w)
        return jet, [odd_predict(q, phi, switches=switches, jet=jet) for phi in phis]
    jet = symbol_jet(q, sizes.jet_L, switches, config.include_w, sizes.Nt, sizes.Ns, config.threads, w_field=w)
    gammas = gamma_terms(jet)
    return jet, [beta_predict(jet, phi, gammas=gammas) for phi in phis]


def cmd_invariants(ctx: CommandContext) -> bool:
    """Symbol-jet samples on the orbit grid and one invariant report per test function."""
    config = ctx.config
    q = config.build_potential()
    w_cache: dict = {}
    for switches in _switch_list(config):
        tag = _tag(switches) if config.scan_conventions else ""
        jet, reports = _predict(ctx, q, switches, w_cache)
        fields = {"q0": jet.q0, "q1": jet.q1}
        if isinstance(jet, SymbolJet):
            fields["q2"] = jet.q2
        fields["W"] = jet.W
        _jet_csv(ctx, f"jet{tag}.csv", fields)
        for report in reports:
            ctx.json(f"invariants_{_safe(report.phi)}{tag}.json", report.to_dict())
    return True


def _tag(switches: Switches) -> str:
    sign = "neg" if switches.delta_s2_sign == "-" else "pos"
    return f"_k{switches.kappa_delta:g}_{switches.phi_arg}_{sign}"


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in name)


@dataclass
class VerifyReport:
    rows: list[dict] = field(default_factory=list)
    arbitration: dict = field(default_factory=dict)
    selected: str = ""
    route_agreement: dict = field(default_factory=dict)
    passed: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _compare(report, fit, tolerances, switches: Switches) -> list[dict]:
    predicted = [report.beta0, report.beta1] + ([report.beta2] if hasattr(report, "beta2") else [])
    rows = []
    for order, value in enumerate(predicted):
        fitted = fit.betas[order]
        abs_error = abs(fitted - value)
        rel_error = abs_error / abs(value) if value else abs_error
        # third coefficient fits are reported but never gate the verdict
        advisory = order == 2
        passed = (rel_error if advisory else abs_error) <= tolerances[order]
        rows.append(
            {
                "phi": report.phi,
                "order": order,
                "predicted": value,
                "fitted": fitted,
                "abs_error": abs_error,
                "rel_error": rel_error,
                "condition": fit.condition,
                "passed": bool(passed),
                "advisory": advisory,
                "switches": switches.label(),
            }
        )
    return rows


def cmd_verify(ctx: CommandContext) -> bool:
    """Measured cluster moments against predicted band invariants."""
    config = ctx.config
    q = config.build_potential()
    alpha = _alpha(config, q)
    dtn = _assemble(ctx, q)
    full = full_spectrum_clusters(dtn, alpha, config.k_min, config.k_max)
    averaged = averaged_spectrum(dtn, full.window, order=2, alpha=alpha)
    ctx.csv("spectrum.csv", ("k", "j", "mu"), averaged.rows())
    ctx.ledger.clusters(averaged)

    fits = {}
    for phi in config.build_test_functions():
        series = moments(averaged, phi)
        fits[phi.name] = asymptotic_fit(series)
        ctx.csv(f"moments_{_safe(phi.name)}.csv", ("k", "T_k"), series.rows())
        ctx.ledger.moments(series)

    report = VerifyReport(route_agreement={str(k): v for k, v in route_agreement(averaged, full).items()})
    w_cache: dict = {}
    scores = {}
    for switches in _switch_list(config):
        rows = []
        _, predictions = _predict(ctx, q, switches, w_cache)
        for prediction in predictions:
            rows.extend(_compare(prediction, fits[prediction.phi], config.beta_tolerances, switches))
        report.rows.extend(rows)
        scores[switches.label()] = sum(r["abs_error"] for r in rows if r["order"] == 1)
    report.arbitration = {"beta1_error": scores, "winner": min(scores, key=scores.get)}
    report.selected = report.arbitration["winner"] if config.scan_conventions else config.switches.label()
    gating = [r for r in report.rows if r["switches"] == report.selected and not r["advisory"]]
    report.passed = all(r["passed"] for r in gating)

    ctx.json("verify.json", report.to_dict())
    ctx.json("fits.json", {name: fit.to_dict() for name, fit in fits.items()})
    columns = ("switches", "phi", "order", "predicted", "fitted", "abs_error", "rel_error", "condition", "passed", "advisory")
    ctx.csv("verify.csv", columns, ([r[c] for c in columns] for r in report.rows))
    ctx.ledger.invariants([r for r in report.rows if r["switches"] == report.selected])
    for row in report.rows:
        if row["switches"] == report.selected:
            mark = "PASS" if row["passed"] else ("note" if row["advisory"] else "FAIL")
            print(f"{row['phi']:>12} beta{row['order']}: predicted {row['predicted']: .6f} fitted {row['fitted']: .6f} [{mark}]")
    if config.scan_conventions:
        print(f"convention scan winner: {report.arbitration['winner']}")
    return report.passed


def cmd_berezin(ctx: CommandContext) -> bool:
    """Symbol-expansion fits of the DtN perturbation and the Berezin-kernel eigenvalue table."""
    config = ctx.config
    q = config.build_potential()
    dtn = _assemble(ctx, q)
    lo, hi, step = config.berezin_k_range
    ks = list(range(lo, min(hi, dtn.L) + 1, step))
    mus = orbit_grid(config.quadrature.orbit_grid)
    samples = sample_symbols(dtn, mus, ks, part="perturbation", scale_by_k=True)
    ctx.csv("berezin_samples.csv", ("mu1", "mu2", "mu3", "k", "re", "im"), samples.rows())
    fit = expansion_fit(samples, J=3)

    leading_error = float(np.max(np.abs(fit.coefficient(0) - synthesize(symbol_jet(q, include_w=False).q0, mus))))
    kappa_errors = {}
    for kappa in (0.5, 1.0):
        jet = symbol_jet(q, switches=Switches(kappa, "q0", config.switches.delta_s2_sign), include_w=False)
        kappa_errors[str(kappa)] = float(np.max(np.abs(fit.coefficient(1) - synthesize(jet.q1, mus))))
    matching = [kappa for kappa, err in kappa_errors.items() if err < 1e-2]

    # matrix elements normalized by 2π√(π/k), fitted in powers of 1/k
    ks_arr = np.array(ks, dtype=float)
    norms = np.array([alpha_norms(k)[0] for k in ks])
    elements = samples.values / ks_arr * norms / (2.0 * np.pi * np.sqrt(np.pi / ks_arr))
    element_fit = fit_series(ks_arr, elements.T, 3)
    variant_errors = {}
    for variant in ("combined", "stationary"):
        p3 = matrix_element_prediction(q, variant, config.switches)[2]
        variant_errors[variant] = float(np.max(np.abs(8.0 * element_fit.coefficient(3) - synthesize(p3, mus))))

    table = []
    for k in ks:
        for ell in range(5):
            exact = funk_hecke_eigenvalue(k, ell)
            table.append((k, ell, exact, berezin_expansion_eigenvalue(k, ell), exact - berezin_expansion_eigenvalue(k, ell)))
    ctx.csv("berezin_kernel.csv", ("k", "ell", "exact", "expansion", "residual"), table)
    # exactly one κ variant must explain the second-order coefficient
    passed = leading_error < 1e-3 and len(matching) == 1
    ctx.json(
        "berezin_fit.json",
        {
            "fit": fit.to_dict(),
            "leading_error": leading_error,
            "kappa_errors": kappa_errors,
            "kappa_matching": matching,
            "matrix_element_fit": element_fit.to_dict(),
            "matrix_element_variant_errors": variant_errors,
            "matrix_element_variant": min(variant_errors, key=variant_errors.get),
            "passed": passed,
        },
    )
    return passed


def cmd_starcheck(ctx: CommandContext) -> bool:
    """Exact-composition, kernel normalization and star-product identity checks."""
    config = ctx.config
    rng = np.random.default_rng(0)
    mus = random_orbits(24, seed=1)
    composition = {}
    for k in (4, 6, 10):
        n = 2 * k + 1
        A = BlockOperator(k, rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n)))
        B = BlockOperator(k, rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n)))
        composition[str(k)] = {
            "random": exact_composition_check(A, B, mus),
            "identity": exact_composition_check(BlockOperator.identity(k), BlockOperator.identity(k), mus),
        }
        composition[str(k)]["lambda0_B"] = exact_composition_check(BlockOperator(k, k * np.eye(n)), B, mus)

    kernel = {}
    for k in (4, 6, 10):
        quad = quadrature_s2(2 * k + 2)
        normalization = quad.average(berezin_kernel(mus[:, None, :], quad.nodes[None, :, :], k))
        f = SphFunction(6, rng.normal(size=49) + 1j * rng.normal(size=49))
        kernel[str(k)] = {
            "normalization": float(np.max(np.abs(normalization - 1.0))),
            "diagonal": float(np.max(np.abs(berezin_kernel(mus, mus, k) - (2 * k + 1)))),
            "transform": float(np.max(np.abs(berezin_transform(f, k).coeffs - berezin_transform_quadrature(f, k).coeffs))),
        }

    f = SphFunction(4, rng.normal(size=25))
    g = SphFunction(4, rng.normal(size=25))
    nodes = random_orbits(50, seed=2)
    d1_sym = float(np.max(np.abs(D1(f, g, nodes) + D1(g, f, nodes) - gradient_inner(f, g, nodes))))

    q = config.build_potential()
    recursion = None
    if not _is_odd(q) and q.constant_value() is None:
        jet = symbol_jet(q, switches=config.switches, include_w=False)
        recursion = exp_symbol_recursion_residual(jet, 1.0, random_orbits(20, seed=3))

    passed = all(max(v.values()) < 1e-9 for v in composition.values()) and all(
        v["normalization"] < 1e-10 and v["diagonal"] < 1e-10 for v in kernel.values()
    )
    ctx.json(
        "starcheck.json",
        {
            "composition": composition,
            "kernel": kernel,
            "d1_symmetric_part": d1_sym,
            "exp_recursion_residual": recursion,
            "passed": passed,
        },
    )
    return passed


COMMANDS: dict[str, Callable[[CommandContext], bool]] = {
    "spectrum": cmd_spectrum,
    "invariants": cmd_invariants,
    "verify": cmd_verify,
    "berezin": cmd_berezin,
    "starcheck": cmd_starcheck,
}


# ---------------------------------------------------------------------------
# Entry
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnbands", description="Band-invariant verification for the DtN map on the ball")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        cmd = sub.add_parser(name, help=func.__doc__)
        cmd.add_argument("--config", required=True, type=Path, help="experiment JSON")
        cmd.add_argument("--out", help="output directory (overrides config)")
        cmd.add_argument("--threads", type=int, help="worker processes")
        cmd.add_argument("--k-min", type=int, dest="k_min")
        cmd.add_argument("--k-max", type=int, dest="k_max")
        cmd.add_argument("--scan-conventions", action="store_true", dest="scan_conventions")
        cmd.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        cmd.add_argument("--no-ledger", action="store_true", dest="no_ledger")
    return parser


def main(argv: list[str] | None = None, session_factory: Callable | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        config = apply_overrides(
            load_config(args.config),
            out=args.out,
            threads=args.threads,
            k_min=args.k_min,
            k_max=args.k_max,
            scan_conventions=args.scan_conventions,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    ledger = Ledger(enabled=not args.no_ledger, session_factory=session_factory)
    ctx = CommandContext(config, out, ledger)
    ledger.start(args.command, config, ctx.switches, out)
    try:
        passed = COMMANDS[args.command](ctx)
        code = EXIT_PASS if passed else EXIT_FAILED
    except GUARD_ERRORS as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        print(f"numerical guard: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_GUARD
    ledger.finish(code)
    summary = {"command": args.command, "exit_code": code, "version": __version__}
    ctx.json(f"{args.command}.status.json", summary)
    return code
