"""Batch command-line surface.

Subcommands cover the full workflow: simulate a ground-truth marketplace,
train the two estimation stages (or the joint direct variant), evaluate
models against held-out and zero-shot slices, attribute predictions to
inputs, run counterfactual feature sweeps, and fit the OLS baseline. Every
command is deterministic given its config and seed, writes a run manifest
next to its outputs, and never mutates its inputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from .config import DEFAULT_CONFIG_YAML, RunConfig, load_config
from .encoder import load_external_embeddings
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    DomainError,
    InvalidParameterError,
    NumericalError,
)
from .hedonic import HedonicModel, HedonicSpec
from .metrics import assemble_report
from .simulator import (
    DEFAULT_MAP,
    GroundTruthMap,
    ReservePolicy,
    SplitSpec,
    generate_dataset,
    load_dataset,
    write_dataset,
)
from .stage1 import train_stage1
from .stage2 import (
    DecoderConfig,
    embedding_bid_function,
    feature_bid_function,
    predict_from_embedding,
    train_direct,
    train_stage2,
)
from .sweeps import SweepSpec, aggregate_csv, monotonicity_report, run_sweep, sweep_csv

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="auctiondemand",
        description="Structural demand estimation for English auctions.",
    )
    parser.add_argument("--config", type=str, default=None, help="YAML config path")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", type=str, default=None, help="override output directory")
    parser.add_argument("--workers", type=int, default=None, help="parallelism cap")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("init-config", help="print the default config file")
    sub.add_parser("simulate", help="generate the synthetic auction dataset")

    train = sub.add_parser("train", help="train a model stage")
    train.add_argument("mode", choices=["stage1", "stage2", "direct"])
    train.add_argument(
        "--embeddings", type=str, default=None,
        help="stage2 only: DEV v1 embedding file replacing the trained encoder",
    )

    evaluate = sub.add_parser("evaluate", help="score models on held-out slices")
    evaluate.add_argument(
        "--models", nargs="+", default=None,
        choices=["two_stage", "direct", "ols"],
    )

    attribute = sub.add_parser("attribute", help="integrated-gradients attributions")
    attribute.add_argument("--ids", nargs="+", default=None, help="listing ids")
    attribute.add_argument("--count", type=int, default=3,
                           help="number of validation listings when --ids is absent")

    sweep = sub.add_parser("sweep", help="counterfactual feature sweep")
    sweep.add_argument("--model", choices=["two_stage", "direct", "oracle"],
                       default="two_stage")

    sub.add_parser("ols", help="fit and export the hedonic baseline")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(
            args.config, seed_override=args.seed, out_override=args.out,
            workers_override=args.workers,
        )
        return _dispatch(args, config)
    except (ConfigError, InvalidParameterError, DomainError, DimensionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def _dispatch(args, config: RunConfig) -> int:
    command = args.command
    if command == "init-config":
        sys.stdout.write(DEFAULT_CONFIG_YAML)
        return 0
    if command == "simulate":
        return cmd_simulate(config)
    if command == "train":
        return cmd_train(config, args.mode, embeddings_path=args.embeddings)
    if command == "evaluate":
        return cmd_evaluate(config, args.models or list(config.evaluate.models))
    if command == "attribute":
        return cmd_attribute(config, ids=args.ids, count=args.count)
    if command == "sweep":
        return cmd_sweep(config, model=args.model)
    if command == "ols":
        return cmd_ols(config)
    raise ConfigError(f"unknown command {command!r}")


def _out(config: RunConfig, *parts) -> Path:
    path = Path(config.out_dir).joinpath(*parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _data_dir(config: RunConfig) -> Path:
    return Path(config.out_dir) / "data"


def _require(path: Path, hint: str) -> Path:
    if not Path(path).exists():
        raise DataError(f"missing {hint}: {path} (run `auctiondemand {hint.split()[0]}` first?)")
    return Path(path)


def _ground_truth_map(config: RunConfig) -> GroundTruthMap:
    return DEFAULT_MAP


def cmd_simulate(config: RunConfig) -> int:
    sim = config.simulate
    dataset = generate_dataset(
        _ground_truth_map(config),
        count=sim.count,
        split_spec=SplitSpec(val_fraction=sim.val_fraction),
        zero_shot_brand=sim.zero_shot_brand,
        seed=config.seed,
        reserve_policy=ReservePolicy(shift=sim.reserve_shift, scale=sim.reserve_scale),
        b_inc=sim.b_inc,
        keep_truth=sim.keep_truth,
        workers=config.workers,
    )
    out = _out(config, "data")
    write_dataset(out, dataset, manifest_extra={"seed": config.seed, "count": sim.count})
    artifacts.write_manifest(out, "simulate", config, {})
    print(f"simulate: {len(dataset.train)} train / {len(dataset.validation)} validation / "
          f"{len(dataset.zero_shot)} zero-shot records in {out}")
    return 0


def _dataset(config: RunConfig):
    data_dir = _require(_data_dir(config), "simulate output")
    return load_dataset(data_dir)


def cmd_train(config: RunConfig, mode: str, embeddings_path: str | None = None) -> int:
    from .plots import save_loss_curve

    dataset = _dataset(config)
    quad = config.quad_config()
    censoring = config.quadrature.censoring

    if mode == "stage1":
        section = config.stage1
        result = train_stage1(
            dataset.train,
            config.optimizer_template(section),
            q=config.encoder.q,
            hidden=config.encoder.hidden,
            batch_size=section.batch_size,
            epochs=section.epochs,
            noise_sigma=section.noise_sigma,
            seed=config.seed,
        )
        out = _out(config, "stage1")
        artifacts.save_stage1(out / "stage1.ckpt", result)
        artifacts.write_history_csv(out / "loss_history.csv", result.history)
        artifacts.write_metadata(out / "run_metadata.txt", result.metadata)
        save_loss_curve(result.history, out / "loss_curve.png", "outcome-encoding training loss")
        artifacts.write_manifest(out, "train stage1", config, {"mode": mode})
        print(f"train stage1: final loss {result.history[-1][2]:.6f} -> {out}")
        return 0

    if mode == "stage2":
        section = config.stage2
        decoder_config = DecoderConfig(
            q=config.encoder.q,
            kappa=config.demand.kappa,
            n_min=config.demand.n_min,
            n_max=config.demand.n_max,
            j_max=section.j_max,
        )
        if embeddings_path is not None:
            table = load_external_embeddings(_require(Path(embeddings_path), "embeddings file"))
            q = len(next(iter(table.values()))) if table else config.encoder.q
            decoder_config = DecoderConfig(
                q=q, kappa=config.demand.kappa, n_min=config.demand.n_min,
                n_max=config.demand.n_max, j_max=section.j_max,
            )
            emb_source = "external"
        else:
            encoder, _, _ = artifacts.load_stage1(
                _require(Path(config.out_dir) / "stage1" / "stage1.ckpt", "train stage1 output")
            )
            table = {r.listing_id: encoder.encode(r.features)
                     for r in dataset.train if not r.excluded}
            emb_source = "stage1"
        result = train_stage2(
            table,
            dataset.train,
            config.optimizer_template(section),
            decoder_config=decoder_config,
            quad_config=quad,
            censoring=censoring,
            batch_size=section.batch_size,
            epochs=section.epochs,
            noise_sigma=section.noise_sigma,
            seed=config.seed,
        )
        out = _out(config, "stage2")
        result.decoder.save(out / "decoder.ckpt", meta={"embeddings": emb_source})
        artifacts.write_history_csv(out / "loss_history.csv", result.history)
        artifacts.write_metadata(out / "run_metadata.txt", result.metadata)
        save_loss_curve(result.history, out / "loss_curve.png", "structural decoding training loss")
        artifacts.write_manifest(out, "train stage2", config,
                                 {"mode": mode, "embeddings": embeddings_path or "stage1"})
        print(f"train stage2: final loss {result.history[-1][2]:.6f} -> {out}")
        return 0

    if mode == "direct":
        section = config.direct
        decoder_config = DecoderConfig(
            q=config.encoder.q,
            kappa=config.demand.kappa,
            n_min=config.demand.n_min,
            n_max=config.demand.n_max,
            j_max=section.j_max,
        )
        result = train_direct(
            dataset.train,
            config.optimizer_template(section),
            encoder_q=config.encoder.q,
            encoder_hidden=config.encoder.hidden,
            decoder_config=decoder_config,
            quad_config=quad,
            censoring=censoring,
            batch_size=section.batch_size,
            epochs=section.epochs,
            noise_sigma=section.noise_sigma,
            seed=config.seed,
        )
        out = _out(config, "direct")
        artifacts.save_direct(out / "model.ckpt", result)
        artifacts.write_history_csv(out / "loss_history.csv", result.history)
        artifacts.write_metadata(out / "run_metadata.txt", result.metadata)
        save_loss_curve(result.history, out / "loss_curve.png", "direct joint training loss")
        artifacts.write_manifest(out, "train direct", config, {"mode": mode})
        print(f"train direct: final loss {result.history[-1][2]:.6f} -> {out}")
        return 0

    raise ConfigError(f"unknown training mode {mode!r}")


def _load_two_stage(config: RunConfig):
    encoder, _, _ = artifacts.load_stage1(
        _require(Path(config.out_dir) / "stage1" / "stage1.ckpt", "train stage1 output")
    )
    from .stage2 import Decoder

    decoder, _ = Decoder.load(
        _require(Path(config.out_dir) / "stage2" / "decoder.ckpt", "train stage2 output")
    )
    return encoder, decoder


def _load_direct_model(config: RunConfig):
    return artifacts.load_direct(
        _require(Path(config.out_dir) / "direct" / "model.ckpt", "train direct output")
    )[:2]


def _model_predictions(encoder, decoder, records, quad, censoring):
    """Per-rank log-bid predictions for every included record with enough bids."""
    j_max = decoder.config.j_max
    preds: dict[int, dict[str, float]] = {rank: {} for rank in range(2, j_max + 1)}
    for record in records:
        if record.excluded or record.n_bidders < j_max:
            continue
        _, pred = predict_from_embedding(decoder, encoder.encode(record.features), quad, censoring)
        for rank, value in zip(pred.ranks, pred.expected_log_bids):
            preds[rank][record.listing_id] = float(value)
    return preds


def _targets(records, j_max):
    targets: dict[int, dict[str, float]] = {rank: {} for rank in range(2, j_max + 1)}
    for record in records:
        if record.excluded or record.n_bidders < j_max:
            continue
        for rank in range(2, j_max + 1):
            targets[rank][record.listing_id] = record.log_bid(rank)
    return targets


def cmd_evaluate(config: RunConfig, models: list[str]) -> int:
    from .plots import save_pred_vs_target

    dataset = _dataset(config)
    quad = config.quad_config()
    censoring = config.quadrature.censoring
    j_max = config.stage2.j_max

    loaded = {}
    if "two_stage" in models:
        loaded["two_stage"] = _load_two_stage(config)
    if "direct" in models:
        loaded["direct"] = _load_direct_model(config)
    if "ols" in models:
        hedonic_spec = HedonicSpec(
            use_cohorts=config.ols.use_cohorts,
            cohort_cutoff=config.ols.cohort_cutoff,
            use_body_style=config.ols.use_body_style,
            include_trend=config.ols.include_trend,
        )
        loaded["ols"] = HedonicModel.train(dataset.train, hedonic_spec)

    out = _out(config, "evaluate")
    slices = {"validation": dataset.validation, "zero_shot": dataset.zero_shot}
    for slice_name, records in slices.items():
        targets = _targets(records, j_max)
        predictions = {}
        for model in models:
            if model in ("two_stage", "direct"):
                encoder, decoder = loaded[model]
                predictions[model] = _model_predictions(encoder, decoder, records, quad, censoring)
            else:
                usable = [r for r in records
                          if not r.excluded and r.n_bidders >= j_max]
                rank2 = loaded["ols"].predict_records(usable)
                predictions[model] = {2: rank2}
        suffix = "" if slice_name == "validation" else "_zero_shot"
        if not targets[2]:
            (out / f"metrics{suffix}.csv").write_text("model,rank,n,rmse_log,r2,mape,mdape,hit,bias\n")
            continue
        reports, csv_text, table_text = assemble_report(
            predictions, targets, config.evaluate.hit_tolerance
        )
        (out / f"metrics{suffix}.csv").write_text(csv_text)
        (out / f"comparison{suffix}.txt").write_text(table_text)
        for model in models:
            per_rank = {}
            for rank, pred_map in predictions[model].items():
                ids = sorted(pred_map)
                per_rank[rank] = (
                    np.array([pred_map[i] for i in ids]),
                    np.array([targets[rank][i] for i in ids]),
                )
            save_pred_vs_target(per_rank, out / f"pred_vs_target_{model}{suffix}.png", model)
    artifacts.write_manifest(out, "evaluate", config, {"models": models})
    print(f"evaluate: wrote metrics for {models} -> {out}")
    return 0


def _feature_labels(schema):
    labels = ["log_mileage", "log_horsepower", "age", "automatic"]
    labels += [f"brand={b}" for b in schema.brands]
    labels += [f"body={s}" for s in schema.body_styles]
    return labels


def cmd_attribute(config: RunConfig, ids: list[str] | None, count: int) -> int:
    from .attribution import aggregate_groups, integrated_gradients
    from .plots import save_attribution_bars

    dataset = _dataset(config)
    encoder, decoder = _load_two_stage(config)
    quad = config.quad_config()
    censoring = config.quadrature.censoring
    section = config.attribution

    usable = [r for r in dataset.validation if not r.excluded]
    if ids:
        by_id = {r.listing_id: r for r in dataset.all_records()}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"unknown listing ids: {missing}")
        records = [by_id[i] for i in ids]
    else:
        records = usable[:count]
    if not records:
        raise DataError("no listings to attribute")

    out = _out(config, "attribution")
    for record in records:
        if section.space == "embedding":
            f = embedding_bid_function(decoder, section.rank, quad, censoring)
            x = encoder.encode(record.features)
            labels = [f"e{i}" for i in range(x.shape[0])]
            groups = []
        else:
            f = feature_bid_function(encoder, decoder, section.rank, quad, censoring)
            x = encoder.schema.vector(record.features)
            labels = _feature_labels(encoder.schema)
            nb = len(encoder.schema.brands)
            groups = [
                ("brand", list(range(4, 4 + nb))),
                ("body_style", list(range(4 + nb, x.shape[0]))),
            ]
        baseline = np.zeros_like(x)
        result = integrated_gradients(f, x, baseline, steps=section.steps,
                                      baseline_id=section.baseline)
        lines = [
            f"# listing_id={record.listing_id}",
            f"# target=rank{section.rank}_expected_log_bid space={section.space}",
            f"# steps={result.steps} baseline={result.baseline_id}",
            f"# f_input={result.f_input!r} f_baseline={result.f_baseline!r}",
            f"# completeness_gap={result.completeness_gap!r} pass={result.completeness_pass}",
            "index,label,attribution",
        ]
        for i, (label, value) in enumerate(zip(labels, result.attributions)):
            lines.append(f"{i},{label},{float(value)!r}")
        if groups:
            for label, value in aggregate_groups(result, groups):
                lines.append(f"group,{label},{value!r}")
        (out / f"attribution_{record.listing_id}.csv").write_text("\n".join(lines) + "\n")
        top = np.argsort(-np.abs(result.attributions))[:16]
        save_attribution_bars(
            [labels[i] for i in top],
            [float(result.attributions[i]) for i in top],
            out / f"attribution_{record.listing_id}.png",
            f"{record.listing_id}: rank-{section.rank} bid attribution",
        )
    artifacts.write_manifest(out, "attribute", config,
                             {"ids": [r.listing_id for r in records], "space": section.space})
    print(f"attribute: wrote {len(records)} attribution files -> {out}")
    return 0


def cmd_sweep(config: RunConfig, model: str = "two_stage") -> int:
    from .plots import save_sweep_curves
    from .pricing import expected_order_stats_unconditional

    dataset = _dataset(config)
    quad = config.quad_config()
    censoring = config.quadrature.censoring
    section = config.sweep
    spec = SweepSpec(feature=section.feature, grid=section.grid,
                     sample_size=section.sample_size)

    if model == "oracle":
        truth_map = _ground_truth_map(config)

        def predict(features):
            vp, mp = truth_map.primitives(features)
            pred = expected_order_stats_unconditional(vp, mp, 2, quad, censoring)
            return float(pred.expected_log_bids[0])
    else:
        encoder, decoder = (
            _load_two_stage(config) if model == "two_stage" else _load_direct_model(config)
        )

        def predict(features):
            _, pred = predict_from_embedding(decoder, encoder.encode(features), quad, censoring)
            return float(pred.expected_log_bids[0])

    usable = [r for r in dataset.validation if not r.excluded]
    if not usable:
        raise DataError("no included validation listings to sweep")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 777]))
    take = min(spec.sample_size, len(usable))
    chosen = sorted(rng.choice(len(usable), size=take, replace=False).tolist())
    sample = [usable[i] for i in chosen]

    result = run_sweep(predict, sample, spec)
    report = monotonicity_report(result)
    out = _out(config, "sweep")
    (out / "sweep.csv").write_text(sweep_csv(result))
    (out / "aggregate.csv").write_text(aggregate_csv(report))
    save_sweep_curves(result, report, out / "sweep.png")
    artifacts.write_manifest(out, "sweep", config,
                             {"model": model, "sample_size": take})
    print(f"sweep ({model}): monotone fraction {report.fraction_monotone:.3f} -> {out}")
    return 0


def cmd_ols(config: RunConfig) -> int:
    dataset = _dataset(config)
    spec = HedonicSpec(
        use_cohorts=config.ols.use_cohorts,
        cohort_cutoff=config.ols.cohort_cutoff,
        use_body_style=config.ols.use_body_style,
        include_trend=config.ols.include_trend,
    )
    model = HedonicModel.train(dataset.train, spec)
    out = _out(config, "ols")
    (out / "coefficients.csv").write_text(model.fit.coefficient_csv())
    usable = [r for r in dataset.validation if not r.excluded]
    preds = model.predict_records(usable)
    lines = ["listing_id,pred_log,target_log"]
    for r in usable:
        lines.append(f"{r.listing_id},{preds[r.listing_id]!r},{r.log_bid(2)!r}")
    (out / "predictions.csv").write_text("\n".join(lines) + "\n")
    artifacts.write_metadata(
        out / "fit_summary.txt",
        {"r2": model.fit.r2, "rmse": model.fit.rmse, "n": len(dataset.train)},
    )
    artifacts.write_manifest(out, "ols", config, {})
    print(f"ols: in-sample r2 {model.fit.r2:.4f} -> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
