#!/usr/bin/env python3
"""
Optimality verifier

Checks first- and second-order optimality conditions at a candidate point of
a nonsmooth program (kind "nonsmooth_p") or of a bilevel program (kind
"bilevel") described by a JSON problem file, and emits a verification report.

Usage:
    python nsopt_verify.py check-first FILE [--seed N] [--samples N] [--json]
    python nsopt_verify.py bilevel second FILE --form both

Exit codes: 0 all requested conditions certified, 1 a condition failed with a
witness, 2 inconclusive, 3 input error.
"""

import argparse
import logging
import sys
from typing import List, Optional

import numpy as np

from bilevel_checker import BilevelChecker, Form, SecondOrderMode
from bilevel_problem import BilevelProblem
from errors import EquivalenceViolation, ScaleExceededError, SensitivityRefusedError, TrackingError, \
    VerificationError
from nsopt_checker import DirectionSampler, MscqVerdict, NonsmoothChecker, NonsmoothProgram, SecondOrderStatus
from problem_file import ProblemFile, ProblemKind, parse_problem
from regularity_probe import PathFamily, ProbeMode, RegularityProber, RegularityVerdict
from reports import EXIT_CODES, EXIT_INPUT_ERROR, VerificationReport, format_summary
from verification_config import CqProvenance, Verdict, VerificationSettings, load_settings, validate_settings

REGULARITY_VERDICTS = {
    RegularityVerdict.CONSISTENT: Verdict.CERTIFIED,
    RegularityVerdict.VIOLATED: Verdict.FAILED,
    RegularityVerdict.INCONCLUSIVE: Verdict.INCONCLUSIVE,
}


class InputError(ValueError):
    """Command does not apply to the given problem."""


def setup_logging(verbose: bool, log_file: Optional[str] = None) -> None:
    """Diagnostics go to stderr; stdout carries the report."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


class OptimalityVerifier:
    """Runs one command against one problem file."""

    def __init__(self, settings: VerificationSettings):
        self.settings = settings
        self.logger = logging.getLogger(__name__)
        self.problem: Optional[ProblemFile] = None
        self.program = None

    def load(self, path: str) -> None:
        self.problem = parse_problem(path)
        # file overrides first, then --tol-scale on top
        self.settings = self.settings.with_overrides(tolerances=self.problem.tolerance_overrides())
        self.program = self.problem.build(self.settings.effective_tolerances())
        self.logger.info(f"Loaded {self.problem.name or path} ({self.problem.kind.value})")

    def _report(self, command: str) -> VerificationReport:
        return VerificationReport(
            command=command,
            problem_name=self.problem.name,
            kind=self.problem.kind.value,
            problem_digest=self.problem.digest(),
            seed=self.settings.seed,
            samples=self.settings.samples,
            tolerances=self.settings.effective_tolerances().to_dict(),
        )

    def _sampler(self) -> DirectionSampler:
        return DirectionSampler(self.settings.samples, self.settings.seed)

    def _require(self, kind: ProblemKind, command: str) -> None:
        if self.problem.kind != kind:
            raise InputError(f"{command} needs a {kind.value} problem, file is {self.problem.kind.value}")

    def run(self, command: str, args: argparse.Namespace) -> VerificationReport:
        handlers = {
            'check-first': self.check_first,
            'check-second': self.check_second,
            'check-cq': self.check_cq,
            'bilevel first': self.bilevel_first,
            'bilevel second': self.bilevel_second,
            'bilevel dual': self.bilevel_dual,
            'bilevel track': self.bilevel_track,
            'probe-regularity': self.probe_regularity,
            'probe-mscq': self.probe_mscq,
            'probe-growth': self.probe_growth,
        }
        self.logger.info(f"Running {command}")
        report = handlers[command](args)
        self.logger.info(f"{command}: {report.verdict.value}")
        return report

    # ---- nonsmooth program ----------------------------------------------

    def _nonsmooth(self, command: str) -> NonsmoothChecker:
        self._require(ProblemKind.NONSMOOTH_P, command)
        return NonsmoothChecker(self.program, self.settings)

    def check_first(self, args) -> VerificationReport:
        checker = self._nonsmooth('check-first')
        report = self._report('check-first')
        first = checker.first_order_check(self._sampler())
        details = first.to_dict()
        if first.holds:
            verdict = Verdict.CERTIFIED if first.exact else Verdict.INCONCLUSIVE
            summary = "f'(x*;d) >= 0 on the linearized tangent cone"
        else:
            verdict = Verdict.FAILED
            details['descent_confirmed'] = checker.confirm_descent(first.witness)
            summary = f"descent direction {np.round(first.witness, 6).tolist()}, f' = {first.witness_value:.6g}"
        report.add('first_order', verdict, details, summary)
        report.caveats.extend(first.caveats)
        return report

    def check_second(self, args) -> VerificationReport:
        checker = self._nonsmooth('check-second')
        mode = SecondOrderMode(args.mode)
        report = self._report('check-second')
        sweep = checker.sufficient_sweep(self._sampler())
        if sweep.status == SecondOrderStatus.NECESSARY_VIOLATED:
            verdict = Verdict.FAILED
        elif mode == SecondOrderMode.NECESSARY or sweep.status == SecondOrderStatus.SUFFICIENT_CERTIFIED:
            verdict = Verdict.CERTIFIED
        else:
            verdict = Verdict.FAILED
        report.add(f"second_order_{mode.value}", verdict, sweep.to_dict(),
                   f"{sweep.status.value}, margin {sweep.margin:.6g}")
        report.regularity.extend({'expression': 'f', 'mode': 'epi', 'verdict': v} for v in sweep.epi_probes)
        report.caveats.extend(sweep.caveats)
        return report

    def _mscq(self, command: str) -> VerificationReport:
        checker = self._nonsmooth(command)
        report = self._report(command)
        probe = checker.mscq_probe()
        if probe.verdict == MscqVerdict.BOUNDED:
            report.cq_provenance = CqProvenance.PROBED
            verdict, summary = Verdict.CERTIFIED, f"ratios bounded by {probe.max_ratio:.4g}"
        else:
            verdict, summary = Verdict.INCONCLUSIVE, f"suspect kappa growth (max ratio {probe.max_ratio:.4g})"
        report.add('mscq_probe', verdict, probe.to_dict(), summary)
        report.caveats.append("MSCQ is probed numerically, not decided")
        return report

    def probe_mscq(self, args) -> VerificationReport:
        return self._mscq('probe-mscq')

    # ---- bilevel program ------------------------------------------------

    def _bilevel(self, command: str) -> BilevelChecker:
        self._require(ProblemKind.BILEVEL, command)
        return BilevelChecker(self.program, self.settings)

    def check_cq(self, args) -> VerificationReport:
        if self.problem.kind == ProblemKind.NONSMOOTH_P:
            return self._mscq('check-cq')
        checker = self._bilevel('check-cq')
        report = self._report('check-cq')
        cq = checker.cq
        details = cq.to_dict()
        details['multiplier_polytope'] = checker.lower.multiplier_polytope().to_dict()
        flags = f"MFCQ {cq.a1}, SSOSC {cq.a2}, CRCQ probe {cq.a3}, LICQ {cq.a4}"
        route_ok = cq.exact_route or (cq.a1 and cq.a2 and cq.a3)
        report.add('lower_level_cq', Verdict.CERTIFIED if route_ok else Verdict.FAILED, details, flags)
        report.caveats.extend(cq.caveats)
        if cq.exact_route:
            gmfcq = checker.gmfcq_check(Form.BOTH)
            report.add('gmfcq', Verdict.CERTIFIED if gmfcq.holds else Verdict.INCONCLUSIVE, gmfcq.to_dict(),
                       f"{len(gmfcq.per_W)} W pieces")
            if gmfcq.holds:
                report.cq_provenance = CqProvenance.CERTIFIED_GMFCQ
        else:
            report.caveats.append("GMFCQ needs the exact route (SSOSC and LICQ); not checked")
        return report

    def bilevel_first(self, args) -> VerificationReport:
        checker = self._bilevel('bilevel first')
        report = self._report('bilevel first')
        report.cq_provenance = checker.provenance()
        first = checker.first_order_check(self._sampler(), Form(args.form))
        if first.holds:
            verdict = Verdict.CERTIFIED
            summary = f"{len(first.critical_directions)} critical directions"
        else:
            verdict = Verdict.FAILED
            summary = f"descent direction {np.round(first.witness, 6).tolist()}"
        report.add('first_order', verdict, first.to_dict(), summary)
        report.caveats.extend(first.caveats)
        return report

    def bilevel_second(self, args) -> VerificationReport:
        checker = self._bilevel('bilevel second')
        mode = SecondOrderMode(args.mode)
        report = self._report('bilevel second')
        report.cq_provenance = checker.provenance()
        second = checker.second_order_check(self._sampler(), mode, Form(args.form))
        verdict = Verdict.CERTIFIED if second.passed else Verdict.FAILED
        summary = f"{second.status.value}, margin {second.margin:.6g}"
        if second.status == SecondOrderStatus.SUFFICIENT_CERTIFIED:
            summary += ", strict bi-local minimizer"
        report.add(f"second_order_{mode.value}", verdict, second.to_dict(), summary)
        report.caveats.extend(second.caveats)
        if second.numeric:
            report.caveats.append("solution-map derivatives are numeric (LICQ fails)")
        return report

    def bilevel_dual(self, args) -> VerificationReport:
        checker = self._bilevel('bilevel dual')
        report = self._report('bilevel dual')
        report.cq_provenance = checker.provenance()
        dual = checker.dual_multipliers(Form(args.form))
        report.add('dual_stationarity', Verdict.CERTIFIED if dual.feasible else Verdict.FAILED, dual.to_dict(),
                   f"{len(dual.per_W)} W pieces")
        return report

    def bilevel_track(self, args) -> VerificationReport:
        checker = self._bilevel('bilevel track')
        report = self._report('bilevel track')
        if args.at is None:
            raise InputError("bilevel track needs --at X")
        point = checker.lower.kkt_track(np.array(args.at, dtype=float))
        details = point.to_dict()
        details['x'] = list(args.at)
        report.add('kkt_track', Verdict.CERTIFIED, details, f"y = {np.round(point.y, 8).tolist()}")
        return report

    # ---- probes ---------------------------------------------------------

    def _directions(self, args, n: int) -> List[np.ndarray]:
        if args.direction:
            d = np.array(args.direction, dtype=float)
            if d.size != n or not np.linalg.norm(d) > 0:
                raise InputError(f"--direction needs {n} entries, not all zero")
            return [d]
        return [s * e for e in np.eye(n) for s in (1.0, -1.0)]

    def probe_regularity(self, args) -> VerificationReport:
        report = self._report('probe-regularity')
        prober = RegularityProber(self.settings)
        verdicts = []
        if self.problem.kind == ProblemKind.NONSMOOTH_P:
            program: NonsmoothProgram = self.program
            expressions = {'f': program.f, 'G': program.G}
            for d in self._directions(args, program.n):
                for name, expr in expressions.items():
                    for family in (PathFamily.CONSTANT_W, PathFamily.T_INVERSE_SQRT, PathFamily.RANDOM_BOUNDED):
                        probe = prober.probe(expr, program.x_star, d, family, ProbeMode.GPH, seed=self.settings.seed)
                        entry = probe.to_dict()
                        entry.update({'expression': name, 'd': d.tolist()})
                        report.regularity.append(entry)
                        verdicts.append(REGULARITY_VERDICTS[probe.verdict])
        else:
            verdicts = self._solution_map_regularity(args, report)
        worst = Verdict.FAILED if Verdict.FAILED in verdicts else (
            Verdict.INCONCLUSIVE if Verdict.INCONCLUSIVE in verdicts else Verdict.CERTIFIED)
        report.add('gph_regularity', worst, {'probes': len(verdicts)},
                   f"{verdicts.count(Verdict.CERTIFIED)} of {len(verdicts)} probes consistent")
        report.caveats.append("regularity is probed on a finite t-grid, not proven")
        return report

    def _solution_map_regularity(self, args, report: VerificationReport) -> List[Verdict]:
        """Residual of the tracked lower solution against its parabolic expansion."""
        checker = self._bilevel('probe-regularity')
        bp: BilevelProblem = self.program
        rng = np.random.default_rng(self.settings.seed)
        y_star = checker.kkt.y
        verdicts = []
        for d in self._directions(args, bp.n):
            for w in (np.zeros(bp.n), rng.standard_normal(bp.n)):
                jet = checker.sens.solution_jet(d, w)
                grid = self.settings.t_grid()
                ratios = []
                try:
                    for t in grid:
                        y = checker.lower.kkt_track(bp.x_star + t * d + 0.5 * t ** 2 * w).y
                        residual = y - y_star - t * jet.y1 - 0.5 * t ** 2 * jet.y2
                        ratios.append(float(np.linalg.norm(residual) / t ** 2))
                except TrackingError as e:
                    self.logger.warning(f"Tracking failed during regularity probe: {e}")
                    verdicts.append(Verdict.INCONCLUSIVE)
                    continue
                verdict = RegularityProber.classify(ratios, float(np.linalg.norm(y_star)))
                report.regularity.append({'expression': 'y(x)', 'd': d.tolist(), 'w': w.tolist(),
                                          't_grid': grid, 'residual_over_t2': ratios, 'verdict': verdict.value,
                                          'numeric': jet.numeric})
                verdicts.append(REGULARITY_VERDICTS[verdict])
        return verdicts

    def probe_growth(self, args) -> VerificationReport:
        report = self._report('probe-growth')
        if self.problem.kind == ProblemKind.NONSMOOTH_P:
            checker = NonsmoothChecker(self.program, self.settings)
            radius = args.radius or 0.1
            gamma = checker.growth_grid_check(radius)
            sweep = checker.sufficient_sweep(self._sampler())
            details = {'gamma_hat': gamma, 'radius': radius, 'second_order_margin': sweep.margin}
            verdict = Verdict.CERTIFIED if gamma > 0 else Verdict.FAILED
            if verdict == Verdict.CERTIFIED and np.isfinite(sweep.margin) and sweep.margin > 0:
                details['margin_check'] = bool(gamma >= 0.25 * sweep.margin)
            report.add('quadratic_growth', verdict, details, f"gamma_hat {gamma:.6g} on radius {radius}")
            return report

        checker = self._bilevel('probe-growth')
        radius = args.radius or self.settings.growth_radius
        margin = None
        try:
            second = checker.second_order_check(self._sampler())
            margin = second.margin if second.passed else None
        except (SensitivityRefusedError, ScaleExceededError) as e:
            report.caveats.append(f"second-order margin unavailable: {e}")
        growth = checker.growth_probe(radius, margin=margin)
        if growth.feasible == 0:
            verdict = Verdict.INCONCLUSIVE
        elif growth.violations or not growth.gamma_hat > 0:
            verdict = Verdict.FAILED
        else:
            verdict = Verdict.CERTIFIED
        report.add('quadratic_growth', verdict, growth.to_dict(),
                   f"gamma_hat {growth.gamma_hat:.6g}, {len(growth.violations)} violations")
        if growth.tracking_failures:
            report.caveats.append(f"{growth.tracking_failures} samples skipped after tracking failures")
        return report


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='Seed for sampled directions and probes')
    common.add_argument('--samples', type=int, help='Number of sampled directions')
    common.add_argument('--tol-scale', type=float, help='Multiply every tolerance by this factor')
    common.add_argument('--json', action='store_true', help='Emit the JSON report on stdout')
    common.add_argument('--verbose', action='store_true', help='Enable verbose logging')

    parser = argparse.ArgumentParser(
        description="Verify optimality conditions of nonsmooth and bilevel programs",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python nsopt_verify.py check-first fixtures/descent_toy.json         # exit 1, witness d = -1
  python nsopt_verify.py check-second fixtures/abs_fixture.json        # margin 2
  python nsopt_verify.py bilevel second fixtures/paper_example.json --form both
  python nsopt_verify.py bilevel track fixtures/paper_example.json --at 0.5
  python nsopt_verify.py probe-mscq fixtures/squared_eq.json --json
        """
    )
    commands = parser.add_subparsers(dest='command', required=True)

    def add_file(sub):
        sub.add_argument('file', help='Problem file (JSON)')
        return sub

    add_file(commands.add_parser('check-first', parents=[common], help='First-order condition of a nonsmooth program'))
    second = add_file(commands.add_parser('check-second', parents=[common],
                                          help='Second-order conditions of a nonsmooth program'))
    second.add_argument('--mode', choices=['necessary', 'sufficient'], default='sufficient')
    add_file(commands.add_parser('check-cq', parents=[common], help='Constraint qualifications'))

    bilevel = commands.add_parser('bilevel', help='Bilevel program checks')
    actions = bilevel.add_subparsers(dest='action', required=True)
    for action, text in (('first', 'Primal first-order condition'), ('second', 'Second-order conditions'),
                         ('dual', 'Dual stationarity'), ('track', 'Track the lower-level KKT point')):
        sub = add_file(actions.add_parser(action, parents=[common], help=text))
        sub.add_argument('--form', choices=[f.value for f in Form], default='both')
        sub.add_argument('--mode', choices=['necessary', 'sufficient'], default='sufficient')
        if action == 'track':
            sub.add_argument('--at', type=float, nargs='+', required=True, help='Upper-level point x')

    regularity = add_file(commands.add_parser('probe-regularity', parents=[common],
                                              help='Second-order gph-regularity probes'))
    regularity.add_argument('--direction', type=float, nargs='+', help='Probe direction d (default: signed axes)')
    add_file(commands.add_parser('probe-mscq', parents=[common], help='Metric subregularity probe'))
    growth = add_file(commands.add_parser('probe-growth', parents=[common], help='Quadratic growth probe'))
    growth.add_argument('--radius', type=float, help='Probe radius')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT_ERROR if e.code else 0

    command = args.command if args.command != 'bilevel' else f"bilevel {args.action}"
    logger = logging.getLogger(__name__)
    try:
        settings = load_settings()
        setup_logging(args.verbose, settings.log_file)
        settings = settings.with_overrides(seed=args.seed, samples=args.samples, tol_scale=args.tol_scale)
        validate_settings(settings)

        verifier = OptimalityVerifier(settings)
        verifier.load(args.file)
        report = verifier.run(command, args)
    except KeyboardInterrupt:
        print("\nProcess interrupted by user", file=sys.stderr)
        return EXIT_CODES[Verdict.INCONCLUSIVE]
    except EquivalenceViolation as e:
        logger.error(f"SP and FP forms disagree: {e}")
        return EXIT_CODES[Verdict.FAILED]
    except (ValueError, OSError) as e:
        logger.error(f"Input error: {e}")
        return EXIT_INPUT_ERROR
    except VerificationError as e:
        logger.error(f"{command} could not decide: {e}")
        return EXIT_CODES[Verdict.INCONCLUSIVE]

    if args.json:
        print(report.to_json())
    else:
        print(format_summary(report))
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
