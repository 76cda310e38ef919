"""Command-line front end.

    pmedit gen-model    --config model.json        --out model-out.json
    pmedit gen-facts    --model model.json --config facts.json --out facts-out.json
    pmedit edit         --config plan.json         --out rundir/
    pmedit layer-sweep  --config plan+layers.json  --out rundir/
    pmedit lambda-sweep --config plan+lambdas.json --out rundir/
    pmedit report       --csv metrics.csv --metric s --group-by batch_size --out plot.svg

Configs are JSON; a plan config mirrors ExperimentPlan field-for-field
(unknown keys are errors, seeds are mandatory).  Sweep configs add a
"layers" or "lambdas" list next to the plan fields.  Run directories
receive manifest.json, plan.json (config echo), metrics.csv, and an s-vs-x
chart as both SVG and PNG.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure (the
failing error class is named on stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import InvalidConfig, NumericalError, PmeditError
from .harness import (
    ExperimentPlan,
    gen_facts,
    lambda_sweep,
    layer_sweep,
    run_batched,
    run_sequential_batched,
    run_singular,
    save_facts,
)
from .model import ToyModelConfig, init_model, load_model, save_model
from .reporting import (
    GROUP_BY_NAMES,
    METRIC_NAMES,
    RunManifest,
    emit_plot_svg,
    group_run_id,
    metrics_rows,
    render_plot_png,
    write_manifest,
    write_metrics_csv,
)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the CLI contract wants 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise InvalidConfig(f"{path}: config must be a JSON object")
    return doc


def _model_config_from(doc: dict, path: str) -> ToyModelConfig:
    if "seed" not in doc:
        raise InvalidConfig(f"{path}: seed is mandatory (no wall-clock default)")
    try:
        return ToyModelConfig(**doc)
    except TypeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None


def _cmd_gen_model(args) -> int:
    config = _model_config_from(_load_json(args.config), args.config)
    model = init_model(config)
    save_model(model, args.out)
    print(f"wrote model ({config.num_layers} layers, seed {config.seed}) to {args.out}")
    return 0


_FACTS_KEYS = {"layer", "count", "n_paraphrases", "para_noise", "neighbor_k", "seed"}


def _cmd_gen_facts(args) -> int:
    model = load_model(args.model)
    doc = _load_json(args.config)
    unknown = set(doc) - _FACTS_KEYS
    if unknown:
        raise InvalidConfig(f"{args.config}: unknown fact-config fields: {sorted(unknown)}")
    missing = {"layer", "count", "seed"} - set(doc)
    if missing:
        raise InvalidConfig(f"{args.config}: missing required fields: {sorted(missing)}")
    facts = gen_facts(
        model,
        layer=doc["layer"],
        count=doc["count"],
        n_paraphrases=doc.get("n_paraphrases", 3),
        para_noise=doc.get("para_noise", 0.05),
        neighbor_k=doc.get("neighbor_k", 5),
        seed=doc["seed"],
    )
    save_facts(facts, args.out, layer=doc["layer"])
    print(f"wrote {len(facts)} facts (layer {doc['layer']}, seed {doc['seed']}) to {args.out}")
    return 0


def _write_run_dir(out_dir: str, plan: ExperimentPlan, rows, group_by: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest.begin(plan)
    manifest_path = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, manifest_path)

    plan_path = os.path.join(out_dir, "plan.json")
    with open(f"{plan_path}.tmp", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(plan.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(f"{plan_path}.tmp", plan_path)

    csv_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(rows, csv_path)
    svg_path = os.path.join(out_dir, "plot_s.svg")
    png_path = os.path.join(out_dir, "plot_s.png")
    emit_plot_svg(csv_path, "s", group_by, svg_path)
    render_plot_png(csv_path, "s", group_by, png_path)

    outputs = [plan_path, csv_path, svg_path, png_path]
    manifest.finalize(outputs)
    write_manifest(manifest, manifest_path)
    return [manifest_path] + outputs


def _cmd_edit(args) -> int:
    plan = ExperimentPlan.from_dict(_load_json(args.config))
    if plan.strategy == "singular":
        reports = run_singular(plan)
    elif plan.strategy == "batched":
        reports = [run_batched(plan)]
    else:
        reports = run_sequential_batched(plan)
    rows = metrics_rows(group_run_id(plan), plan, reports)
    paths = _write_run_dir(args.out, plan, rows, group_by="batch_size")
    final = reports[-1]
    print(
        f"{plan.algorithm} {plan.strategy}: {plan.total_edits} edits, "
        f"final es={final.es:.4f} ps={final.ps:.4f} ns={final.ns:.4f} s={final.s:.2f}"
    )
    print("\n".join(paths))
    return 0


def _cmd_layer_sweep(args) -> int:
    doc = _load_json(args.config)
    layers = doc.pop("layers", None)
    if not isinstance(layers, list) or not layers:
        raise InvalidConfig(f"{args.config}: layer-sweep config needs a non-empty 'layers' list")
    plan = ExperimentPlan.from_dict(doc)
    if plan.strategy != "singular":
        raise InvalidConfig("layer-sweep runs singular edits; set strategy to 'singular'")
    results = layer_sweep(plan, [int(v) for v in layers])
    run_id = group_run_id(plan)
    rows = []
    for layer in sorted(results):
        rows.extend(metrics_rows(run_id, plan, [results[layer]], layer=layer))
    paths = _write_run_dir(args.out, plan, rows, group_by="layer")
    best = max(sorted(results), key=lambda ell: results[ell].s)
    print(f"layer sweep over {sorted(results)}: best layer {best} (s={results[best].s:.2f})")
    print("\n".join(paths))
    return 0


def _cmd_lambda_sweep(args) -> int:
    doc = _load_json(args.config)
    lambdas = doc.pop("lambdas", None)
    if not isinstance(lambdas, list) or not lambdas:
        raise InvalidConfig(
            f"{args.config}: lambda-sweep config needs a non-empty 'lambdas' list"
        )
    plan = ExperimentPlan.from_dict(doc)
    if plan.strategy != "batched":
        raise InvalidConfig("lambda-sweep runs batched edits; set strategy to 'batched'")
    results = lambda_sweep(plan, [float(v) for v in lambdas])
    base = group_run_id(plan)
    rows = []
    for lam in sorted(results):
        rows.extend(metrics_rows(f"{base}-lam{lam:g}", plan, [results[lam]]))
    paths = _write_run_dir(args.out, plan, rows, group_by="lambda")
    print(f"lambda sweep over {sorted(results)} done ({plan.algorithm})")
    print("\n".join(paths))
    return 0


def _cmd_report(args) -> int:
    emit_plot_svg(args.csv, args.metric, args.group_by, args.out)
    png_path = os.path.splitext(args.out)[0] + ".png"
    render_plot_png(args.csv, args.metric, args.group_by, png_path)
    print(args.out)
    print(png_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="pmedit",
        description="Closed-form key-value model editing on toy residual FFN stacks.",
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-model", help="initialize a model from a config and save it")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.set_defaults(func=_cmd_gen_model)

    p = sub.add_parser("gen-facts", help="generate a synthetic fact set for a model")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--config", required=True, help="fact-generation config JSON")
    p.add_argument("--out", required=True, help="output facts JSON path")
    p.set_defaults(func=_cmd_gen_facts)

    p = sub.add_parser("edit", help="run an editing experiment plan")
    p.add_argument("--config", required=True, help="experiment plan JSON")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("layer-sweep", help="singular runs across layers")
    p.add_argument("--config", required=True, help="plan JSON plus a 'layers' list")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=_cmd_layer_sweep)

    p = sub.add_parser("lambda-sweep", help="batched runs across lambda values")
    p.add_argument("--config", required=True, help="plan JSON plus a 'lambdas' list")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=_cmd_lambda_sweep)

    p = sub.add_parser("report", help="render charts from a metrics CSV")
    p.add_argument("--csv", required=True, help="metrics CSV path")
    p.add_argument("--metric", required=True, choices=METRIC_NAMES)
    p.add_argument("--group-by", required=True, choices=GROUP_BY_NAMES)
    p.add_argument("--out", required=True, help="output SVG path (PNG lands alongside)")
    p.set_defaults(func=_cmd_report)

    return parser


def cli_main(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:  # our error() raises 1; --help exits 0
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        print("pmedit: error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except PmeditError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


def main() -> int:
    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
