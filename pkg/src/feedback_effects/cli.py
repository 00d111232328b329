"""Command-line pipelines: simulate, estimate, bias, lang, report.

Exit codes are a stable contract: 0 success, 1 validation error (bad
arguments, bad config, bad log), 2 computation error (an estimator could
not complete on valid inputs).  Every command writes its outputs
atomically into --out and finishes with a manifest; re-running a command
with the same arguments reproduces the numeric outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, bias, domain, lang, matching, propensity, sim, survival
from .errors import ComputationError, ValidationError
from .manifest import RunManifest, atomic_write_text, read_manifest, sha256_file

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_COMPUTATION = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; bad usage is a validation failure here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.17g}"


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _grid(args) -> np.ndarray:
    grid = np.arange(args.grid_start, args.grid_end + 1e-9, args.grid_step)
    if grid.size == 0:
        raise ValidationError("empty time grid")
    return grid


# --- simulate -----------------------------------------------------------------


def _cmd_simulate(args) -> int:
    config = sim.load_config(args.config)
    if args.seed is not None:
        config = sim.SimConfig(
            n_users=config.n_users,
            horizon_h=config.horizon_h,
            s=config.s,
            hazard_helpful=config.hazard_helpful,
            hazard_unhelpful=config.hazard_unhelpful,
            seed=args.seed,
            confounders=config.confounders,
            covariates=config.covariates,
            annotation_window_h=config.annotation_window_h,
        )
    out = _ensure_out(args.out)
    log, truth = sim.simulate_event_log(config)

    events_path = os.path.join(out, "events.jsonl")
    lines = "".join(json.dumps(rec.to_json_dict()) + "\n" for rec in log)
    atomic_write_text(events_path, lines)

    schema_path = os.path.join(out, "schema.json")
    atomic_write_text(schema_path, json.dumps(log.schema.to_json_dict(), indent=2) + "\n")

    truth_doc = truth.to_json_dict(grid=_grid(args) if args.grid_end > 0 else None)
    truth_doc["horizon_h"] = config.horizon_h
    truth_path = os.path.join(out, "ground_truth.json")
    atomic_write_text(truth_path, json.dumps(truth_doc, indent=2) + "\n")

    manifest = RunManifest("simulate", _arg_snapshot(args), config.seed)
    manifest.add_input(args.config)
    for path in (events_path, schema_path, truth_path):
        manifest.add_output(path)
    manifest.write(out)
    print(f"simulated {config.n_users} users -> {events_path}")
    return EXIT_OK


# --- estimate -----------------------------------------------------------------


def _propensity_diagnostics(encoder, X, z, e, weights) -> dict:
    quantiles = [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0]
    balance = propensity.balance_diagnostics(X, z, weights, encoder.feature_names)
    return {
        "propensity": {
            "quantiles": {str(q): float(np.quantile(e, q)) for q in quantiles},
            "n_clamped": int(
                ((e <= propensity.PROPENSITY_CLAMP) | (e >= 1 - propensity.PROPENSITY_CLAMP)).sum()
            ),
        },
        "arms": {"treated": int((z == 1).sum()), "control": int((z == 0).sum())},
        "balance": [
            {
                "feature": row.feature,
                "smd_raw": row.smd_raw,
                "smd_weighted": row.smd_weighted,
                "flagged": row.flagged,
            }
            for row in balance
        ],
    }


def _cmd_estimate(args) -> int:
    schema = domain.read_schema_json(args.schema)
    log = domain.read_log_jsonl(args.log, schema)
    out = _ensure_out(args.out)
    estimates_path = os.path.join(out, "estimates.csv")
    diag_path = os.path.join(out, "diagnostics.json")
    model_path = None

    if args.method == "rpce":
        curve = survival.rpce_pipeline(
            log,
            end_h=args.end_h,
            grid=_grid(args),
            scheme=args.scheme,
            n_boot=args.n_boot,
            seed=args.seed,
            ridge=args.ridge,
            threads=args.threads,
        )
        rows = ["t,estimate,ci_low,ci_high\n"]
        for j, t in enumerate(curve.grid):
            lo = _fmt(curve.ci_low[j]) if curve.ci_low is not None else ""
            hi = _fmt(curve.ci_high[j]) if curve.ci_high is not None else ""
            rows.append(f"{_fmt(t)},{_fmt(curve.estimate[j])},{lo},{hi}\n")
        atomic_write_text(estimates_path, "".join(rows))
        diag, model_path = _weighted_diag_and_model(log, args, out)
        peak = int(np.argmax(np.abs(curve.estimate)))
        print(
            f"rpce ({args.scheme}): extreme {_fmt(curve.estimate[peak])} "
            f"at t={curve.grid[peak]:g}h"
        )
    elif args.method == "active-days":
        result = propensity.active_days_ate(
            log,
            k=args.k,
            scheme=args.scheme,
            end_h=args.end_h,
            n_boot=args.n_boot,
            seed=args.seed,
            ridge=args.ridge,
            threads=args.threads,
        )
        atomic_write_text(
            estimates_path,
            "method,scheme,k,estimate,ci_low,ci_high,n_units\n"
            f"active-days,{args.scheme},{args.k},{_fmt(result.estimate)},"
            f"{_fmt(result.ci_low)},{_fmt(result.ci_high)},{result.n_units}\n",
        )
        diag, model_path = _weighted_diag_and_model(log, args, out)
        print(
            f"active-days ATE ({args.scheme}, k={args.k}): {_fmt(result.estimate)} "
            f"[{_fmt(result.ci_low)}, {_fmt(result.ci_high)}]"
        )
    else:  # cem
        annotated, y = propensity.active_day_outcomes(
            log, args.k, end_h=args.end_h, strict=False
        )
        covs = [r.covariates for r in annotated]
        z = np.array([r.helpful for r in annotated])
        fields = args.cem_fields.split(",") if args.cem_fields else None
        spec = matching.default_coarsening(covs, fields=fields, n_bins=args.cem_bins)
        keys = [matching.coarsen(c, spec) for c in covs]
        result = matching.cem_match(keys, z)
        estimate = matching.cem_ate(
            y, z, result, n_boot=args.n_boot, seed=args.seed, threads=args.threads
        )
        atomic_write_text(
            estimates_path,
            "method,scheme,k,estimate,ci_low,ci_high,n_units\n"
            f"cem,,{args.k},{_fmt(estimate.estimate)},"
            f"{_fmt(estimate.ci_low)},{_fmt(estimate.ci_high)},{estimate.n_units}\n",
        )
        diag = json.loads(result.summary_json())
        print(
            f"cem ATE (k={args.k}): {_fmt(estimate.estimate)} "
            f"[{_fmt(estimate.ci_low)}, {_fmt(estimate.ci_high)}] "
            f"({result.matched_treated + result.matched_control} matched)"
        )

    atomic_write_text(diag_path, json.dumps(diag, indent=2) + "\n")
    manifest = RunManifest("estimate", _arg_snapshot(args), args.seed)
    manifest.add_input(args.log)
    manifest.add_input(args.schema)
    manifest.add_output(estimates_path)
    manifest.add_output(diag_path)
    if model_path is not None:
        manifest.add_output(model_path)
    manifest.write(out)
    return EXIT_OK


def _weighted_diag_and_model(log, args, out) -> tuple[dict, str]:
    annotated = [recs[0] for recs in log.by_user().values()]
    covs = [r.covariates for r in annotated]
    z = np.array([r.helpful for r in annotated])
    encoder = propensity.CovariateEncoder.fit(covs, log.schema)
    X = encoder.transform(covs)
    model = propensity.fit_logistic(X, z.astype(float), ridge=args.ridge, encoder=encoder)
    model_path = os.path.join(out, "propensity_model.json")
    atomic_write_text(model_path, model.to_json() + "\n")
    e = model.predict_from_design(X)
    w = propensity.balancing_weight(e, z, args.scheme)
    return _propensity_diagnostics(encoder, X, z, e, w), model_path


# --- bias ---------------------------------------------------------------------


def _cmd_bias(args) -> int:
    out = _ensure_out(args.out)
    outputs = []
    doc: dict = {}

    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - {"s", "p", "delta_p", "n_prev", "n_joiners"}
        if unknown:
            raise ValidationError(f"unknown scenario field(s): {sorted(unknown)}")
        for name, value in loaded.items():
            setattr(args, name, value)
    if args.s is None:
        raise ValidationError("s is required (via --s or --config)")

    if args.sweep:
        s_values = [float(x) for x in args.s_values.split(",")]
        n_steps = int(round(args.delta_p_max / args.delta_p_step))
        dp_grid = [i * args.delta_p_step for i in range(n_steps + 1)]
        rows = bias.error_sweep(s_values, dp_grid)
        sweep_path = os.path.join(out, "sweep.csv")
        text = "s,delta_p,epsilon_hat\n" + "".join(
            f"{_fmt(s)},{_fmt(dp)},{_fmt(eps)}\n" for s, dp, eps in rows
        )
        atomic_write_text(sweep_path, text)
        outputs.append(sweep_path)
        doc["sweep"] = {"rows": len(rows), "path": os.path.basename(sweep_path)}
        print(f"sweep: {len(rows)} rows -> {sweep_path}")
    else:
        eps_hat = bias.approx_error(args.s, args.delta_p)
        doc["approx_error"] = eps_hat
        doc["measured_satisfaction"] = args.s + eps_hat
        line = (
            f"approx error {_fmt(eps_hat)}; measured satisfaction "
            f"{100.0 * (args.s + eps_hat):.1f}%"
        )
        if args.p is not None:
            scenario = bias.BiasScenario(
                s=args.s,
                p=args.p,
                delta_p=args.delta_p,
                n_prev=args.n_prev,
                n_joiners=args.n_joiners,
            )
            eps = bias.exact_error(scenario)
            doc["exact_error"] = eps
            line = f"exact error {_fmt(eps)}; " + line
            if args.panel:
                panel = sim.simulate_survey_panel(scenario, args.seed)
                s_hat, err = bias.survey_estimate(panel)
                doc["panel"] = {
                    "s_hat": s_hat,
                    "empirical_error": err,
                    "abs_dev_from_exact": abs(err - eps),
                }
                line += f"; panel s_hat {_fmt(s_hat)} (empirical error {_fmt(err)})"
        print(line)
        bias_path = os.path.join(out, "bias.json")
        atomic_write_text(bias_path, json.dumps(doc, indent=2) + "\n")
        outputs.append(bias_path)

    manifest = RunManifest("bias", _arg_snapshot(args), args.seed)
    if args.config:
        manifest.add_input(args.config)
    for path in outputs:
        manifest.add_output(path)
    manifest.write(out)
    return EXIT_OK


# --- lang ----------------------------------------------------------------------


def _cmd_lang(args) -> int:
    out = _ensure_out(args.out)
    manifest = RunManifest(f"lang-{args.lang_command}", _arg_snapshot(args), None)
    if args.lang_command == "train":
        corpus = lang.read_corpus(args.corpus)
        lm = lang.train_trigram(corpus, k=args.k, alpha=args.alpha)
        model_path = os.path.join(out, "lm.json")
        atomic_write_text(model_path, lm.to_json() + "\n")
        manifest.add_input(args.corpus)
        manifest.add_output(model_path)
        print(f"trained on {len(corpus)} sentences, vocab {len(lm.unigrams)} -> {model_path}")
    elif args.lang_command == "pp":
        lm = lang.TrigramLm.from_json(open(args.model, encoding="utf-8").read())
        sentences = lang.read_corpus(args.input)
        scores = [lang.perplexity(lm, s) for s in sentences]
        pp_path = os.path.join(out, "pp.csv")
        text = "index,pp\n" + "".join(f"{i},{_fmt(p)}\n" for i, p in enumerate(scores))
        atomic_write_text(pp_path, text)
        manifest.add_input(args.model)
        manifest.add_input(args.input)
        manifest.add_output(pp_path)
        print(f"mean pp {np.mean(scores):.4g} over {len(scores)} sentences")
    elif args.lang_command == "trend":
        lm = lang.TrigramLm.from_json(open(args.model, encoding="utf-8").read())
        schema = domain.read_schema_json(args.schema)
        log = domain.read_log_jsonl(args.log, schema)
        window = domain.StudyWindow(
            start_h=args.window_start,
            end_h=args.window_end,
            new_user_quiet_period_days=args.quiet_days,
        )
        cohorts = domain.assign_cohorts(log, window)
        trend = lang.cohort_pp_trend(lm, log, cohorts, window, args.window_days)
        trend_path = os.path.join(out, "trend.csv")
        rows = ["window_start_h,cohort,mean_pp\n"]
        for name, series in sorted(trend.series.items()):
            for start, value in zip(trend.window_starts_h, series):
                pp = "" if value is None else _fmt(value)
                rows.append(f"{_fmt(start)},{name},{pp}\n")
        atomic_write_text(trend_path, "".join(rows))
        manifest.add_input(args.model)
        manifest.add_input(args.log)
        manifest.add_output(trend_path)
        retained = trend.retained_mean_pp
        dropout = trend.dropout_mean_pp
        print(
            "retained mean pp "
            + ("n/a" if retained is None else f"{retained:.4g}")
            + ", dropout mean pp "
            + ("n/a" if dropout is None else f"{dropout:.4g}")
        )
    elif args.lang_command == "diversity":
        sentences = lang.read_corpus(args.input)
        doc = {
            "self_bleu": lang.self_bleu_diversity(sentences),
            "jaccard": lang.jaccard_diversity(sentences),
        }
        if args.embeddings:
            table = lang.read_embeddings(args.embeddings)
            doc["wed"] = lang.wed_diversity(sentences, table)
            manifest.add_input(args.embeddings)
        div_path = os.path.join(out, "diversity.json")
        atomic_write_text(div_path, json.dumps(doc, indent=2) + "\n")
        manifest.add_input(args.input)
        manifest.add_output(div_path)
        print(", ".join(f"{k} {v:.6g}" for k, v in doc.items()))
    else:  # chisq
        counts = [int(x) for x in args.counts.split(",")]
        if len(counts) != 4:
            raise ValidationError(
                "--counts needs helpful_high,helpful_low,unhelpful_high,unhelpful_low"
            )
        table = lang.ContingencyTable2x2(*counts)
        stat, p_value = lang.chi_squared_2x2(table)
        doc = {
            "statistic": stat,
            "p_value": p_value,
            "unhelpful_rate_high_pp": table.unhelpful_rate_high(),
            "unhelpful_rate_low_pp": table.unhelpful_rate_low(),
        }
        chisq_path = os.path.join(out, "chisq.json")
        atomic_write_text(chisq_path, json.dumps(doc, indent=2) + "\n")
        manifest.add_output(chisq_path)
        print(f"chi2 {stat:.4f}, p {p_value:.3g}")
    manifest.write(out)
    return EXIT_OK


# --- report --------------------------------------------------------------------


def _cmd_report(args) -> int:
    out = _ensure_out(args.out)
    runs = []
    for run_dir in args.runs:
        doc = read_manifest(run_dir)
        verified = all(
            os.path.exists(os.path.join(run_dir, name))
            and sha256_file(os.path.join(run_dir, name)) == digest
            for name, digest in doc["outputs"].items()
        )
        runs.append(
            {
                "dir": os.fspath(run_dir),
                "command": doc["command"],
                "seed": doc["seed"],
                "outputs": sorted(doc["outputs"]),
                "digests_verified": verified,
            }
        )
    report_path = os.path.join(out, "report.json")
    atomic_write_text(report_path, json.dumps({"runs": runs}, indent=2) + "\n")

    lines = ["# Run report", ""]
    for run in runs:
        status = "ok" if run["digests_verified"] else "DIGEST MISMATCH"
        lines.append(
            f"- `{run['command']}` in `{run['dir']}` (seed {run['seed']}): "
            f"{', '.join(run['outputs'])} [{status}]"
        )
    md_path = os.path.join(out, "report.md")
    atomic_write_text(md_path, "\n".join(lines) + "\n")

    manifest = RunManifest("report", _arg_snapshot(args), None)
    manifest.add_output(report_path)
    manifest.add_output(md_path)
    manifest.write(out)
    print(f"report over {len(runs)} run(s) -> {report_path}")
    return EXIT_OK


# --- wiring ---------------------------------------------------------------------


def _arg_snapshot(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="feedback-effects", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic event log with ground truth")
    p_sim.add_argument("--config", required=True, help="simulator config (TOML or JSON)")
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_sim.add_argument("--grid-start", type=float, default=1.0)
    p_sim.add_argument("--grid-end", type=float, default=336.0)
    p_sim.add_argument("--grid-step", type=float, default=1.0)
    p_sim.set_defaults(func=_cmd_simulate)

    p_est = sub.add_parser("estimate", help="run a causal estimator over a log")
    p_est.add_argument("--log", required=True, help="JSON-lines interaction log")
    p_est.add_argument("--schema", required=True, help="covariate schema JSON")
    p_est.add_argument("--method", required=True, choices=["rpce", "active-days", "cem"])
    p_est.add_argument("--scheme", default="overlap", choices=list(propensity.WEIGHT_SCHEMES))
    p_est.add_argument("--end-h", type=float, required=True, help="censoring horizon in hours")
    p_est.add_argument("--grid-start", type=float, default=1.0)
    p_est.add_argument("--grid-end", type=float, default=336.0)
    p_est.add_argument("--grid-step", type=float, default=1.0)
    p_est.add_argument("--k", type=int, default=3, choices=[3, 14], help="active-day window in days")
    p_est.add_argument("--n-boot", type=int, default=200)
    p_est.add_argument("--ridge", type=float, default=1e-6)
    p_est.add_argument("--seed", type=int, default=0)
    p_est.add_argument("--threads", type=int, default=1)
    p_est.add_argument("--cem-fields", default=None, help="comma-separated covariates to match on")
    p_est.add_argument("--cem-bins", type=int, default=5)
    p_est.add_argument("--out", required=True)
    p_est.set_defaults(func=_cmd_estimate)

    p_bias = sub.add_parser("bias", help="survey measurement-error model")
    p_bias.add_argument("--s", type=float, default=None)
    p_bias.add_argument("--config", default=None, help="JSON scenario file (s, p, delta_p, n_prev, n_joiners)")
    p_bias.add_argument("--delta-p", type=float, default=0.0)
    p_bias.add_argument("--p", type=float, default=None)
    p_bias.add_argument("--n-prev", type=int, default=100000)
    p_bias.add_argument("--n-joiners", type=int, default=0)
    p_bias.add_argument("--panel", action="store_true", help="draw a Monte Carlo panel check")
    p_bias.add_argument("--sweep", action="store_true")
    p_bias.add_argument("--s-values", default="0.4,0.5,0.6,0.7")
    p_bias.add_argument("--delta-p-max", type=float, default=0.5)
    p_bias.add_argument("--delta-p-step", type=float, default=0.05)
    p_bias.add_argument("--seed", type=int, default=0)
    p_bias.add_argument("--out", required=True)
    p_bias.set_defaults(func=_cmd_bias)

    p_lang = sub.add_parser("lang", help="language metrics")
    lang_sub = p_lang.add_subparsers(dest="lang_command", required=True)

    p_train = lang_sub.add_parser("train")
    p_train.add_argument("--corpus", required=True)
    p_train.add_argument("--k", type=float, default=0.01)
    p_train.add_argument("--alpha", type=float, default=0.4)
    p_train.add_argument("--out", required=True)

    p_pp = lang_sub.add_parser("pp")
    p_pp.add_argument("--model", required=True)
    p_pp.add_argument("--input", required=True)
    p_pp.add_argument("--out", required=True)

    p_trend = lang_sub.add_parser("trend")
    p_trend.add_argument("--model", required=True)
    p_trend.add_argument("--log", required=True)
    p_trend.add_argument("--schema", required=True)
    p_trend.add_argument("--window-start", type=float, default=0.0)
    p_trend.add_argument("--window-end", type=float, required=True)
    p_trend.add_argument("--quiet-days", type=int, default=60)
    p_trend.add_argument("--window-days", type=int, default=30)
    p_trend.add_argument("--out", required=True)

    p_div = lang_sub.add_parser("diversity")
    p_div.add_argument("--input", required=True)
    p_div.add_argument("--embeddings", default=None)
    p_div.add_argument("--out", required=True)

    p_chisq = lang_sub.add_parser("chisq")
    p_chisq.add_argument(
        "--counts",
        required=True,
        help="helpful_high,helpful_low,unhelpful_high,unhelpful_low",
    )
    p_chisq.add_argument("--out", required=True)

    p_lang.set_defaults(func=_cmd_lang)

    p_rep = sub.add_parser("report", help="collate manifests from prior runs")
    p_rep.add_argument("--runs", nargs="+", required=True)
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ComputationError as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTATION


if __name__ == "__main__":
    sys.exit(main())
