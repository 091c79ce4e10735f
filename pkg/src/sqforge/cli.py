"""Command-line interface.

Exit codes: 0 ok, 1 I/O, parse or usage error, 2 infeasible construction,
3 verification failure, 4 decoder limits.

Every command given ``--out PATH`` also writes ``PATH.manifest.json``;
``sqforge replay PATH.manifest.json`` regenerates the output byte for byte.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .decoder import DecoderParams, decode
from .errors import (
    CertificateViolation,
    DatasetFormatError,
    DatasetTooSmall,
    GridTooCoarse,
    Infeasible,
    NumericalRankFailure,
    PackingExhausted,
)
from .harness import TrialConfig, run_trials
from .instance import (
    ComplementFamily,
    InstanceParams,
    build_conditional,
    planted_direction,
    sample_null,
    sample_planted,
)
from .io import dumps_json, format_dataset, format_list, read_dataset
from .moments import LP_TOL, MIXTURE_TOL, dual_certificate_check, sup_ratio_value
from .rng import derive_seed
from .verify import (
    chi2_bound_value,
    chi2_budget,
    chi2_of_conditional,
    chi2_tail_bound,
    default_truncation,
    expected_chi2,
    sample_moment_audit,
)

EXIT_OK, EXIT_IO, EXIT_INFEASIBLE, EXIT_VERIFY, EXIT_DECODER = 0, 1, 2, 3, 4
SUP_RATIO_LIMIT = 0.5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_IO, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    subcommand: str
    params: dict
    seed: int | None
    version: str
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    duration_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def manifest_path(out) -> Path:
    return Path(str(out) + ".manifest.json")


# --------------------------------------------------------------------------
# Shared pieces
# --------------------------------------------------------------------------


def _instance_flags(p: argparse.ArgumentParser, alpha_required: bool = True):
    p.add_argument("--alpha", type=float, required=alpha_required)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--m", type=int, default=None, help="matched order; default floor(0.3/sqrt(alpha)), at least 1")
    p.add_argument("--B", type=float, default=None, help="support bound; default 4 sqrt(m)")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--c", type=float, default=0.3)


def _params(ns) -> InstanceParams:
    try:
        return InstanceParams(alpha=ns.alpha, rho=ns.rho, d=ns.d, c=ns.c, m=ns.m, B=ns.B)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _params_from_manifest(man: dict) -> InstanceParams:
    try:
        return InstanceParams(alpha=man["alpha"], rho=man["rho"], d=man["d"], c=man.get("c", 0.3),
                              m=man.get("m"), B=man.get("B"))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"dataset manifest lacks instance parameters ({exc})") from None


def _emit(ns, text: str):
    if ns.out:
        Path(ns.out).write_text(text)
    else:
        sys.stdout.write(text)


def _args_dict(ns) -> dict:
    return {k: v for k, v in sorted(vars(ns).items()) if k not in ("func", "command")}


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------


def cmd_generate(ns) -> int:
    params = _params(ns)
    if ns.n < 1:
        raise UsageError("--n must be >= 1")
    if ns.planted:
        v = planted_direction(params.d, params.c, ns.seed, ns.direction_id)
        ds = sample_planted(params, v, ns.n, ns.seed, keep_provenance=ns.provenance, direction_id=ns.direction_id)
    else:
        ds = sample_null(params, ns.n, ns.seed)
    _emit(ns, format_dataset(ds))
    if ns.out:
        print(f"wrote {ds.n} rows ({'planted' if ns.planted else 'null'}) to {ns.out}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------


def _y_grid(alpha: float, points: int) -> np.ndarray:
    s = 4.0 / math.sqrt(alpha)
    return np.linspace(-s, s, points)


def verify_report(params: InstanceParams, y_points: int, kmax: int | None, cert_trials: int, seed: int,
                  dataset=None, audit_direction=None, audit_label: str = ""):
    """Build the verification report text and the first failing row (or ``None``)."""
    K = default_truncation(params.m) if kmax is None else kmax
    family = ComplementFamily.for_params(params)
    lines = [
        "# sqforge verification report",
        "# params " + dumps_json(params.to_dict()),
        f"# truncation K={K}; chi2 bound slack factor 10 (the O() constants are unspecified)",
        "y,alpha_y,atoms,max_residual,cert_min_slack,sup_ratio,chi2,chi2_bound,tail_bound,status",
    ]
    failures = []
    max_sup = max_resid = -math.inf
    min_slack = math.inf
    for idx, y in enumerate(_y_grid(params.alpha, y_points)):
        y = float(y)
        model = build_conditional(y, params, family)
        mix = model.mixture
        cert = dual_certificate_check(mix, trials=cert_trials, seed=derive_seed(seed, "certificate", idx),
                                      raise_on_violation=False)
        sup = sup_ratio_value(y, params.alpha, params.m)
        chi2 = chi2_of_conditional(model, K)
        bound = chi2_bound_value(y, params)
        tail = chi2_tail_bound(model, K)
        resid = mix.max_residual()
        F = mix.complement
        problems = []
        if resid > MIXTURE_TOL:
            problems.append("residual")
        if len(F) > 2 * params.m + 1 or np.max(np.abs(F.atoms)) > F.support_bound * (1 + 1e-12):
            problems.append("support")
        if not cert.ok:
            problems.append("certificate")
        if sup > SUP_RATIO_LIMIT:
            problems.append("sup-ratio")
        if not 0 <= chi2 <= bound:
            problems.append("chi2")
        status = "ok" if not problems else "FAIL:" + "+".join(problems)
        row = (f"{y:.10g},{mix.alpha_y:.6e},{len(F)},{resid:.3e},{cert.min_scaled_slack:.3e},"
               f"{sup:.6f},{chi2:.6e},{bound:.6e},{tail:.3e},{status}")
        lines.append(row)
        if problems:
            failures.append(row)
        max_sup, max_resid = max(max_sup, sup), max(max_resid, resid)
        min_slack = min(min_slack, cert.min_scaled_slack)
    exp_chi2 = expected_chi2(params, family, K)
    lines += [
        "# summary",
        f"max_residual {max_resid:.3e} (tolerance {MIXTURE_TOL:g})",
        f"certificate_min_slack {min_slack:.3e} (tolerance {-LP_TOL:g})",
        f"sup_ratio_max {max_sup:.6f} (limit {SUP_RATIO_LIMIT})",
        f"expected_chi2 {exp_chi2:.6e}",
        f"chi2_budget {chi2_budget(params):.6e}",
    ]
    if not math.isfinite(exp_chi2) or exp_chi2 < 0:
        failures.append(f"expected_chi2 {exp_chi2}")
    if dataset is not None:
        order = 2 * params.m
        audit = sample_moment_audit(dataset, audit_direction, order, alpha=params.alpha)
        lines.append(f"# sample audit along {audit_label}, orders 1..{order}, n={dataset.n}")
        lines.append("i,j,mean,stderr,z")
        for i, j, mean, se, z in audit.rows:
            row = f"{i},{j},{mean:.6e},{se:.6e},{z:.4f}"
            lines.append(row)
            if abs(z) > audit.threshold:
                failures.append("audit " + row)
        lines.append(f"audit_max_abs_z {audit.max_abs_z:.4f} (threshold {audit.threshold:g})")
    lines.append(f"result {'PASS' if not failures else 'FAIL'}")
    return "\n".join(lines) + "\n", (failures[0] if failures else None)


def cmd_verify(ns) -> int:
    dataset = direction = None
    label = ""
    if ns.input:
        dataset = read_dataset(ns.input)
        params = _params_from_manifest(dataset.manifest)
        if dataset.manifest.get("planted"):
            direction = planted_direction(params.d, params.c, dataset.manifest["seed"], dataset.manifest.get("direction_id") or 0)
            label = "planted direction"
        else:
            g = np.random.Generator(np.random.Philox(derive_seed(ns.seed, "audit-direction"))).standard_normal(params.d)
            direction = g / np.linalg.norm(g)
            label = "random direction"
        if dataset.n < 2:
            dataset = None
    else:
        if ns.alpha is None:
            raise UsageError("verify needs --in PATH or --alpha")
        params = _params(ns)
    text, failure = verify_report(params, ns.y_grid, ns.kmax, ns.cert_trials, ns.seed, dataset, direction, label)
    _emit(ns, text)
    if failure:
        print(f"verification failed at: {failure}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# --------------------------------------------------------------------------
# decode
# --------------------------------------------------------------------------


def cmd_decode(ns) -> int:
    ds = read_dataset(ns.input)
    man = ds.manifest
    alpha = ns.alpha if ns.alpha is not None else man.get("alpha")
    sigma = ns.sigma if ns.sigma is not None else man.get("sigma")
    if alpha is None or sigma is None:
        raise UsageError("decode needs --alpha and --sigma (not found in the dataset manifest)")
    try:
        p = DecoderParams(alpha=alpha, sigma=sigma, t=ns.t, gamma=ns.gamma, candidate_grid=ns.grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    res = decode(ds, p)
    summary = {"list_size": len(res), "candidates": res.candidates, "accepted": res.accepted,
               "grid": res.grid, "n": ds.n, "d": ds.d, **p.to_dict()}
    beta = None
    if man.get("planted") and "rho" in man:
        beta = man["rho"] * planted_direction(ds.d, man.get("c", 0.3), man["seed"], man.get("direction_id") or 0)
        summary["min_distance_to_planted"] = res.min_distance(beta)
    _emit(ns, format_list(res.betas, summary))
    print(f"list size {len(res)} (gamma {p.gamma:.4g})", file=sys.stderr)
    if beta is not None:
        print(f"min distance to planted beta {res.min_distance(beta):.6g}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# test
# --------------------------------------------------------------------------


def cmd_test(ns) -> int:
    params = _params(ns)
    try:
        cfg = TrialConfig(params, ns.n, ns.trials, ns.seed, ns.decoder)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rep = run_trials(cfg)
    _emit(ns, rep.to_csv())
    sys.stderr.write(rep.summary())
    return EXIT_VERIFY if rep.failed == len(rep.records) else EXIT_OK


# --------------------------------------------------------------------------
# replay
# --------------------------------------------------------------------------


def cmd_replay(ns) -> int:
    try:
        man = RunManifest.from_json(Path(ns.manifest).read_text())
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise UsageError(f"bad manifest: {exc}") from None
    if man.subcommand not in _COMMANDS:
        raise UsageError(f"manifest names unknown subcommand {man.subcommand!r}")
    args = dict(man.params)
    if ns.out:
        args["out"] = ns.out
    return _run(argparse.Namespace(**args, command=man.subcommand, func=_COMMANDS[man.subcommand]))


_COMMANDS = {"generate": cmd_generate, "verify": cmd_verify, "decode": cmd_decode, "test": cmd_test}


# --------------------------------------------------------------------------
# Parser and entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sqforge", description="Hard instances for list-decodable linear regression.")
    parser.add_argument("--version", action="version", version=f"sqforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="sample a null or planted dataset")
    _instance_flags(g)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    kind = g.add_mutually_exclusive_group(required=True)
    kind.add_argument("--planted", action="store_true")
    kind.add_argument("--null", dest="planted", action="store_false")
    g.add_argument("--direction-id", type=int, default=0)
    g.add_argument("--provenance", action="store_true", help="record inlier flags")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("verify", help="certify the construction (and audit a dataset)")
    v.add_argument("--in", dest="input")
    _instance_flags(v, alpha_required=False)
    v.add_argument("--kmax", type=int, default=None)
    v.add_argument("--y-grid", type=int, default=41)
    v.add_argument("--cert-trials", type=int, default=1000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    dcd = sub.add_parser("decode", help="run the grid list decoder on a dataset")
    dcd.add_argument("--in", dest="input", required=True)
    dcd.add_argument("--alpha", type=float)
    dcd.add_argument("--sigma", type=float)
    dcd.add_argument("--t", type=float)
    dcd.add_argument("--gamma", type=float)
    dcd.add_argument("--grid", type=int, help="direction-net subdivisions")
    dcd.add_argument("--out")
    dcd.set_defaults(func=cmd_decode)

    t = sub.add_parser("test", help="run hypothesis-testing trials through the reduction")
    _instance_flags(t)
    t.add_argument("--n", type=int, default=2000, help="rows per arm")
    t.add_argument("--trials", type=int, default=20)
    t.add_argument("--decoder", choices=["grid", "oracle", "empty"], default="oracle")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    t.set_defaults(func=cmd_test)

    r = sub.add_parser("replay", help="rerun a command from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="write to this path instead of the recorded one")
    r.set_defaults(func=cmd_replay)

    return parser


def _run(ns) -> int:
    start = time.perf_counter()
    try:
        code = ns.func(ns)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DatasetFormatError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Infeasible as exc:
        print(f"infeasible: {exc} (residual {exc.residual:.3e})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (CertificateViolation, NumericalRankFailure) as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except PackingExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DatasetTooSmall, GridTooCoarse) as exc:
        print(f"decoder limit: {exc}", file=sys.stderr)
        return EXIT_DECODER
    if ns.command != "replay" and getattr(ns, "out", None):
        inputs = [ns.input] if getattr(ns, "input", None) else []
        man = RunManifest(ns.command, _args_dict(ns), getattr(ns, "seed", None), __version__,
                          inputs, [ns.out], round(time.perf_counter() - start, 6))
        try:
            manifest_path(ns.out).write_text(man.to_json())
        except OSError as exc:
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
    return code


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    return _run(ns)


if __name__ == "__main__":
    sys.exit(main())
