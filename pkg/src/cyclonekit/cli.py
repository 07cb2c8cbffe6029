"""Command-line pipeline: synth, pretrain, finetune, predict, evaluate, attribute.

Every stage reads and writes under ``--out``::

    data/pretrain/<id>/      synthetic storms for pre-training
    data/finetune/<id>/      optional separate storms for fine-tuning
    pretrain/                final/ and best/ checkpoints, loss_history.csv, stats.json
    finetune/                one checkpoint per model, models.json, splits.json
    predict/predictions.json
    evaluate/                table.csv, long.csv
    attribute/               weights.csv, residuals.csv

and echoes its effective config as ``<stage>/config.toml``.
"""
from __future__ import annotations

import os

# must happen before numpy loads its BLAS
if os.environ.get("CYCLONEKIT_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["CYCLONEKIT_THREADS"])

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import attribution as at  # noqa: E402
from . import config as C  # noqa: E402
from . import data, mae  # noqa: E402
from . import evaluation as ev  # noqa: E402
from . import finetune as ft  # noqa: E402
from .errors import ContractError, MissingArtifactError  # noqa: E402

log = logging.getLogger("cyclonekit")

STAGES = ("synth", "pretrain", "finetune", "predict", "evaluate", "attribute")
FINETUNE_SEED_OFFSET = 1


# ---------------------------------------------------------------- helpers

def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(stage, path)
    return path


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _storms(root: Path) -> list:
    dirs = data.list_cyclones(root)
    if not dirs:
        raise MissingArtifactError("synth", root)
    return [data.read_cyclone(d) for d in dirs]


def _finetune_source(out: Path) -> Path:
    d = out / "data" / "finetune"
    return d if d.exists() else _need(out / "data" / "pretrain", "synth")


def _prepare(storms, cfg: C.RunConfig, stats: data.NormStats):
    crop = data.CropConfig(sat_hw=cfg.model.sat_hw, era5_hw=cfg.model.era5_hw)
    return [(track, data.zscore([data.crop_sample(s, crop) for s in samples], stats)) for track, samples in storms]


def _windows(storms, ids, leads, all_starts=False) -> list:
    """Windows with every requested lead present; ``all_starts`` keeps every t0 (targets are then optional)."""
    out = []
    need = max(leads) // 6
    for track, ss in storms:
        if track.cyclone_id not in ids:
            continue
        if all_starts:
            out += [data.build_window(ss, k, leads=(), track=track) for k in range(data.INPUT_STEPS - 1, len(ss))]
        else:
            out += [data.build_window(ss, k, leads=leads, track=track) for k in data.window_starts(len(ss), need)]
    return out


def _load_encoder(out: Path):
    params, mcfg, _ = mae.load_mae(_need(out / "pretrain" / "final" / "manifest.json", "pretrain").parent)
    stats = data.NormStats.from_dict(_read_json(_need(out / "pretrain" / "stats.json", "pretrain")))
    return params, mcfg, stats


def _load_models(out: Path, enc):
    index = _read_json(_need(out / "finetune" / "models.json", "finetune"))
    return [(m["name"], ft.load_finetuned(out / "finetune" / m["name"], enc)) for m in index]


# ---------------------------------------------------------------- stages

def cmd_synth(cfg: C.RunConfig, out: Path):
    d = cfg.data
    base = data.VortexConfig(sat_hw=d.hw, era5_hw=d.hw, noise=d.noise, duration=d.duration)
    sets = [("pretrain", d.n_cyclones, cfg.seed, 0)]
    if d.n_finetune:
        sets.append(("finetune", d.n_finetune, cfg.seed + FINETUNE_SEED_OFFSET, d.n_cyclones))
    for name, n, seed, first in sets:
        for track, samples in data.synth_dataset(n, seed, base, first_index=first):
            data.write_cyclone(out / "data" / name, track, samples)
    C.echo(cfg, out / "data")
    log.info("synth: wrote %s", ", ".join(f"{n} {name} storms" for name, n, *_ in sets))


def cmd_pretrain(cfg: C.RunConfig, out: Path):
    storms = _storms(out / "data" / "pretrain")
    crop = data.CropConfig(sat_hw=cfg.model.sat_hw, era5_hw=cfg.model.era5_hw)
    cropped = [data.crop_sample(s, crop) for _, ss in storms for s in ss]
    stats = data.fit_stats(cropped)
    samples = data.zscore(cropped, stats)
    p = cfg.pretrain
    train = mae.PretrainConfig(epochs=p.epochs, lr=p.lr, batch_size=p.batch_size, seed=cfg.seed, mask=cfg.mask)
    stage = out / "pretrain"
    stage.mkdir(parents=True, exist_ok=True)
    _write_json(stage / "stats.json", stats.to_dict())
    mae.pretrain(samples, cfg.model, train, stage,
                 progress=lambda e, loss: log.info("pretrain epoch %d loss %.5f", e, loss))
    C.echo(cfg, stage)


def cmd_finetune(cfg: C.RunConfig, out: Path):
    enc, mcfg, stats = _load_encoder(out)
    storms = _prepare(_storms(_finetune_source(out)), cfg, stats)
    ids = [t.cyclone_id for t, _ in storms]
    kept, test = data.split_by_cyclone(ids, cfg.data.test_fraction, cfg.seed)
    train, val = data.split_by_cyclone(kept, cfg.data.val_fraction, cfg.seed + 1)
    stage = out / "finetune"
    _write_json(stage / "splits.json", {"train": train, "val": val, "test": test})
    f = cfg.finetune
    index = []
    for variable in f.variables:
        cache: dict = {}
        groups = [tuple(f.leads)] if f.shared_trunk else [(lead,) for lead in f.leads]
        for leads in groups:
            w_tr, w_va = _windows(storms, set(train), leads), _windows(storms, set(val), leads)
            feats = (ft.featurize_windows(enc, mcfg, w_tr, variable, cache),
                     ft.featurize_windows(enc, mcfg, w_va, variable, cache) if w_va else None)
            fc = ft.FinetuneConfig(variable=variable, leads=leads, basin=f.basin or None, hidden=f.hidden,
                                   layers=f.layers, bins=f.bins, track_bins=f.track_bins, sigma_bins=f.sigma_bins,
                                   epochs=f.epochs, lr=f.lr, decay=f.decay, patience=f.patience,
                                   batch_size=f.batch_size, seed=cfg.seed)
            model = ft.finetune(enc, mcfg, w_tr, fc, w_va, features=feats)
            name = f"{variable}_" + ("all" if f.shared_trunk else f"{leads[0]}h")
            ft.save_finetuned(stage / name, model)
            index.append({"name": name, "variable": variable, "leads": list(leads)})
            best = min(h["val_loss"] for h in model.history)
            log.info("finetune %s: %d train / %d val windows, best val loss %.4f", name, len(w_tr), len(w_va), best)
    _write_json(stage / "models.json", index)
    C.echo(cfg, stage)


def _test_storms(cfg: C.RunConfig, out: Path, stats):
    splits = _read_json(_need(out / "finetune" / "splits.json", "finetune"))
    return _prepare(_storms(_finetune_source(out)), cfg, stats), set(splits["test"])


def cmd_predict(cfg: C.RunConfig, out: Path):
    enc, _, stats = _load_encoder(out)
    models = _load_models(out, enc)
    storms, test = _test_storms(cfg, out, stats)
    records: dict = {}
    for name, model in models:
        windows = _windows(storms, test, model.config.leads, all_starts=True)
        if not windows:
            raise ContractError("no test windows to predict")
        for w, pred in zip(windows, ft.predict_batch(model, windows)):
            key = (w.cyclone_id, w.t0.isoformat(), model.config.variable)
            rec = records.setdefault(key, {"cyclone_id": w.cyclone_id, "basin": w.basin, "t0": key[1],
                                           "variable": key[2], "forecasts": {}})
            rec["forecasts"].update({str(lead): entry for lead, entry in pred.items()})
    _write_json(out / "predict" / "predictions.json", [records[k] for k in sorted(records)])
    C.echo(cfg, out / "predict")
    log.info("predict: %d forecast records", len(records))


def cmd_evaluate(cfg: C.RunConfig, out: Path):
    report = ev.EvalReport()
    pred_path = out / "predict" / "predictions.json"
    if pred_path.exists():
        preds = _read_json(pred_path)
        tracks = {t.cyclone_id: t for t, _ in _storms(_finetune_source(out))}
        report = ev.score(preds, tracks, cfg.eval.model_name, "Persistence" if cfg.eval.persistence else None)
    for p in cfg.eval.baselines:
        path = cfg.resolve(p)
        if not path.exists():
            raise ContractError(f"baseline CSV {path} not found")
        report = ev.ingest_baselines(path, report)
    if not len(report):
        raise MissingArtifactError("predict", pred_path)
    stage = out / "evaluate"
    stage.mkdir(parents=True, exist_ok=True)
    ev.emit_table(report, stage / "table.csv", cfg.eval.precision)
    ev.emit_long(report.merge(report.overall()), stage / "long.csv")
    C.echo(cfg, stage)


def cmd_attribute(cfg: C.RunConfig, out: Path):
    enc, _, stats = _load_encoder(out)
    models = _load_models(out, enc)
    storms, test = _test_storms(cfg, out, stats)
    a = cfg.attribution
    acfg = at.AttributionConfig(steps=a.steps, baseline=a.baseline, component=a.component)
    summaries, residual_rows = [], []
    for name, model in models:
        windows = _windows(storms, test, model.config.leads, all_starts=True)[:a.n_windows]
        for lead in model.config.leads:
            reports = [at.attribute(model, w, lead, acfg) for w in windows]
            weights = {p: float(np.mean([r.weights[p] for r in reports])) for p in at.PREDICTORS}
            summaries.append(at.AttributionReport(model.config.variable, lead, (), 0.0, 0.0, 0.0, weights))
            residual_rows += [[model.config.variable, lead, w.cyclone_id, w.t0.isoformat(), repr(r.f_input),
                               repr(r.f_baseline), repr(r.residual), repr(r.relative_residual)]
                              for w, r in zip(windows, reports)]
    stage = out / "attribute"
    stage.mkdir(parents=True, exist_ok=True)
    at.emit_csv(summaries, stage / "weights.csv")
    lines = ["variable,lead,cyclone_id,t0,f_input,f_baseline,residual,relative_residual"]
    lines += [",".join(map(str, r)) for r in residual_rows]
    (stage / "residuals.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    C.echo(cfg, stage)


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "predict": cmd_predict, "evaluate": cmd_evaluate, "attribute": cmd_attribute}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cyclonekit", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=STAGES)
    ap.add_argument("--config", required=True, help="TOML run config")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", default="out", help="run directory (default: ./out)")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        COMMANDS[args.command](cfg, Path(args.out))
    except Exception as e:  # one parsable line, nonzero exit
        msg = " ".join(str(e).split())
        print(f"error: {args.command}: {type(e).__name__}: {msg}", file=sys.stderr)
        if args.verbose:
            log.exception("traceback")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
