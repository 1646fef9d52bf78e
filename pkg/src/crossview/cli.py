"""Command-line entry point: ``crossview <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

SUBCOMMANDS = ("prepare-data", "synth-data", "train", "synthesize", "warp", "composite",
               "evaluate", "report", "train-classifier")
SNAPSHOT = "config.resolved.json"
GRID_ROWS = 4

log = logging.getLogger("crossview")


class CommandError(RuntimeError):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ------------------------------------------------------------------ helpers


def _manifest_path(p) -> Path:
    p = Path(p)
    return p / "manifest.json" if p.is_dir() else p


def _parse_sets(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise CommandError("config", f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_snapshot(out: Path, command: str, args: dict, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "args": {k: v for k, v in args.items() if k not in ("out", "func", "command", "verbose")}}
    argv = [command]
    for k, v in doc["args"].items():
        if v is None or v is False:
            continue
        flag = "--" + k.replace("_", "-")
        if v is True:
            argv.append(flag)
        elif isinstance(v, list):
            for item in v:
                argv += [flag, str(item)]
        else:
            argv += [flag, str(v)]
    doc["argv"] = argv
    if extra:
        doc.update(extra)
    (out / SNAPSHOT).write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def replay(snapshot_path, out) -> int:
    """Re-run the command recorded in a resolved-config snapshot into ``out``."""
    doc = json.loads(Path(snapshot_path).read_text())
    return main([*doc["argv"], "--out", str(out)])


def _read_dir_images(d: Path) -> dict:
    from .dataman import read_image

    return {p.stem: read_image(p) for p in sorted(Path(d).glob("*.png"))}


# ------------------------------------------------------------------ subcommands


def cmd_synth_data(a):
    from .dataman import write_synthetic_dataset

    out = Path(a.out)
    write_synthetic_dataset(out, a.n, seed=a.seed, size=a.size, test_fraction=a.test_fraction)
    write_snapshot(out, "synth-data", vars(a))
    print(out / "manifest.json")


def cmd_prepare_data(a):
    from .dataman import DatasetManifest, ManifestRecord, load_dataset, write_image
    from .geometry import Correspondences, estimate_homography

    out = Path(a.out)
    m = DatasetManifest.load(_manifest_path(a.manifest))
    for sub in ("aerial", "ground", "seg", "warped", "aerial_seg"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    homography = None
    if a.correspondences:
        homography = estimate_homography(Correspondences.load(a.correspondences))
        homography.save(out / "homography.txt")
        m.homography = str((out / "homography.txt").resolve())
    elif m.homography:
        homography = m.dataset_homography()
        homography.save(out / "homography.txt")
    splits = {r.id: r.split for r in m.records}
    samples = load_dataset(m)
    records = []
    for s in samples:
        name = f"{s.id}.png"
        write_image(out / "aerial" / name, s.aerial)
        write_image(out / "ground" / name, s.ground)
        write_image(out / "seg" / name, s.ground_seg)
        rec = ManifestRecord(id=s.id, aerial=f"aerial/{name}", ground=f"ground/{name}", seg=f"seg/{name}",
                             split=splits[s.id], label=s.label)
        if s.aerial_seg is not None:
            write_image(out / "aerial_seg" / name, s.aerial_seg)
            rec.aerial_seg = f"aerial_seg/{name}"
        if s.warped_aerial is not None:
            write_image(out / "warped" / name, s.warped_aerial)
            rec.warped = f"warped/{name}"
        records.append(rec)
    DatasetManifest(records=records, root=out, resize=m.resize,
                    homography="homography.txt" if homography is not None else None).save(out / "manifest.json")
    write_snapshot(out, "prepare-data", vars(a), {"n_samples": len(records),
                                                  "skipped": list(load_dataset.last_skipped)})
    print(out / "manifest.json")


def _train_config(a):
    from .trainer import TrainConfig, preset

    cfg = preset(a.preset) if a.preset else TrainConfig()
    if a.config:
        cfg = TrainConfig.from_text(Path(a.config).read_text(), base=cfg)
    overrides = _parse_sets(a.set)
    for key in ("method", "direction", "seed"):
        if getattr(a, key) is not None:
            overrides[key] = getattr(a, key)
    return cfg.with_overrides(overrides)


def cmd_train(a):
    from .dataman import DatasetManifest, load_dataset
    from .trainer import train, train_h_regions

    cfg = _train_config(a)
    a.out = a.out or str(Path("runs") / f"train-{cfg.method}-{a.preset or 'custom'}")
    m = DatasetManifest.load(_manifest_path(a.data))
    data = [s for s in load_dataset(m, split="train")]
    if a.limit:
        data = data[: a.limit]
    for s in data:
        if s.size != cfg.resolution:
            raise CommandError("data", f"sample {s.id} is {s.size}px but resolution={cfg.resolution}")
    out = Path(a.out)
    write_snapshot(out, "train", vars(a), {"train_config": cfg.to_dict(), "n_train": len(data)})
    h = m.dataset_homography()
    if cfg.method == "h-regions":
        res = train_h_regions(cfg, data, out_dir=out, homography=h)
        last = res.realism.log[-1] if res.realism.log else {}
    else:
        res = train(cfg, data, out_dir=out, homography=h)
        last = res.log[-1] if res.log else {}
    print(json.dumps({"out": str(out), **{k: last[k] for k in last}}))


def cmd_synthesize(a):
    from .dataman import DatasetManifest, load_dataset, write_image
    from .trainer import Checkpoint, synthesize, synthesize_regions

    run = Path(a.checkpoint)
    m = DatasetManifest.load(_manifest_path(a.data))
    samples = load_dataset(m, split=a.split)
    if a.limit:
        samples = samples[: a.limit]
    if not samples:
        raise CommandError("data", f"no samples in split {a.split!r}")
    regions = run.is_dir() and (run / "checkpoint_realism.pt").exists()
    if regions:
        cks = [Checkpoint.load(run / f"checkpoint_{t}.pt") for t in ("inpaint", "car", "realism")]
        cfg = cks[0].cfg
    else:
        ck = Checkpoint.load(run / "checkpoint.pt" if run.is_dir() else run)
        cfg = ck.cfg
    a.out = a.out or str(Path("runs") / f"synth-{cfg.method}")
    out = Path(a.out)
    for sub in ("fake", "real", "input", "seg"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    a2g = cfg.direction == "a2g"
    for s in samples:
        src = s.aerial if a2g else s.ground
        if regions:
            img, seg = synthesize_regions(cks, src), None
        else:
            res = synthesize(ck, src)
            img, seg = res if isinstance(res, tuple) else (res, None)
        name = f"{s.id}.png"
        write_image(out / "fake" / name, img)
        write_image(out / "real" / name, s.ground if a2g else s.aerial)
        write_image(out / "input" / name, src)
        if seg is not None:
            write_image(out / "seg" / name, seg)
    write_snapshot(out, "synthesize", vars(a), {"method": cfg.method, "n": len(samples)})
    print(out)


def cmd_warp(a):
    from .dataman import read_image, to_unit, write_image
    from .geometry import Correspondences, Homography, estimate_homography, warp_image

    if bool(a.homography) == bool(a.correspondences):
        raise CommandError("config", "give exactly one of --homography or --correspondences")
    h = Homography.load(a.homography) if a.homography else estimate_homography(Correspondences.load(a.correspondences))
    img = to_unit(read_image(a.image))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    warped, valid = warp_image(img, h)
    write_image(out / "warped.png", warped)
    from PIL import Image

    Image.fromarray(valid.astype(np.uint8) * 255, mode="L").save(out / "valid.png")
    h.save(out / "homography.txt")
    write_snapshot(out, "warp", vars(a))
    print(out / "warped.png")


def cmd_composite(a):
    from .dataman import read_image, to_unit, write_image
    from .geometry import RegionMaskSet, composite_regions, default_region_masks

    imgs = [to_unit(read_image(p)) for p in (a.inpaint, a.car, a.warped)]
    size = imgs[0].shape[0]
    masks = RegionMaskSet.load(a.masks) if a.masks else default_region_masks(size, a.band_width)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / "composite.png", composite_regions(*imgs, masks))
    masks.save(out / "masks")
    write_snapshot(out, "composite", vars(a))
    print(out / "composite.png")


def _method_name(fake_dir: Path) -> str:
    snap = fake_dir.resolve().parent / SNAPSHOT
    if snap.exists():
        doc = json.loads(snap.read_text())
        if doc.get("method"):
            return doc["method"]
    return fake_dir.resolve().parent.name


def _load_classifier(a):
    from .metrics import PrecomputedClassifier

    if a.precomputed:
        return PrecomputedClassifier.from_dir(a.precomputed), True
    if not a.classifier:
        raise CommandError("config", "give --classifier or --precomputed")
    from .classifier import SceneClassifier

    return SceneClassifier.load(a.classifier), False


def cmd_evaluate(a):
    from .metrics import evaluate

    fake = _read_dir_images(Path(a.fake))
    real = _read_dir_images(Path(a.real))
    ids = sorted(set(fake) & set(real))
    if not ids:
        raise CommandError("data", f"no common image ids between {a.fake} and {a.real}")
    clf, precomputed = _load_classifier(a)
    f_imgs, r_imgs = [fake[i] for i in ids], [real[i] for i in ids]
    if precomputed:
        class _Keyed:
            def probs(self, images):
                return clf.probs("fake" if images is f_imgs else "real")

            def acts(self, images):
                return clf.acts("fake" if images is f_imgs else "real")

        report = evaluate(f_imgs, r_imgs, _Keyed(), kl_batches=a.kl_batches)
    else:
        report = evaluate(f_imgs, r_imgs, clf, kl_batches=a.kl_batches)
    method = a.method or _method_name(Path(a.fake))
    a.out = a.out or str(Path("runs") / f"eval-{method}")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "metrics.csv", method)
    (out / "metrics.txt").write_text(report.to_text(method))
    write_snapshot(out, "evaluate", vars(a), {"method_name": method, "n": len(ids),
                                              "fake_dir": str(Path(a.fake).resolve()),
                                              "real_dir": str(Path(a.real).resolve())})
    print(report.to_text(method), end="")


def build_grid(columns: list, ids: list, cell: int = 128) -> np.ndarray:
    """Rows are sample ids; each column is a dict id -> image (``None`` renders black)."""
    from .dataman import resize

    rows = []
    for i in ids:
        cells = []
        for col in columns:
            im = col.get(i)
            if im is None:
                cells.append(np.zeros((cell, cell, 3), dtype=np.uint8))
            else:
                cells.append(np.clip(np.rint(resize(im.astype(np.float32), cell)), 0, 255).astype(np.uint8))
        rows.append(np.concatenate(cells, axis=1))
    return np.concatenate(rows, axis=0)


def report(run_dirs, out, inputs=None, n_rows: int = GRID_ROWS) -> dict:
    """Metric table across evaluated runs plus an input | truth | methods image grid."""
    from PIL import Image

    from .metrics import REPORT_COLUMNS, format_table, read_report_csv

    runs = []
    for d in run_dirs:
        d = Path(d)
        snap = json.loads((d / SNAPSHOT).read_text()) if (d / SNAPSHOT).exists() else {}
        name = snap.get("method_name", d.name)
        metrics = read_report_csv(d / "metrics.csv") if (d / "metrics.csv").exists() else {}
        runs.append((name, snap, metrics))
    if not runs:
        raise CommandError("data", "report needs at least one run directory")
    runs.sort(key=lambda r: r[0])
    table = {name: {c: metrics.get(c, "--") for c in REPORT_COLUMNS} for name, _, metrics in runs}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(format_table(table))
    import csv

    with (out / "table.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *REPORT_COLUMNS])
        for name, row in table.items():
            w.writerow([name, *row.values()])

    fakes = [_read_dir_images(Path(s["fake_dir"])) if "fake_dir" in s else {} for _, s, _ in runs]
    real_dir = next((s["real_dir"] for _, s, _ in runs if "real_dir" in s), None)
    real = _read_dir_images(Path(real_dir)) if real_dir else {}
    if inputs is None and real_dir:
        guess = Path(real_dir).parent / "input"
        inputs = guess if guess.exists() else None
    inp = _read_dir_images(Path(inputs)) if inputs else {}
    ids = sorted(set(real) | set().union(*[set(f) for f in fakes]))[:n_rows]
    columns = [inp, real, *fakes]
    if ids:
        Image.fromarray(build_grid(columns, ids)).save(out / "grid.png")
    return {"methods": [r[0] for r in runs], "columns": len(columns), "rows": len(ids)}


def cmd_report(a):
    info = report(a.runs, a.out, inputs=a.inputs)
    write_snapshot(Path(a.out), "report", vars(a), info)
    print((Path(a.out) / "table.txt").read_text(), end="")


def cmd_train_classifier(a):
    from .classifier import train_scene_classifier

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    clf = train_scene_classifier(n=a.n, seed=a.seed, steps=a.steps, size=a.size)
    clf.save(out / "classifier.pt")
    write_snapshot(out, "train-classifier", vars(a))
    print(out / "classifier.pt")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossview", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="render a synthetic paired dataset")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64, choices=(64, 256))
    s.add_argument("--test-fraction", type=float, default=0.25)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("prepare-data", help="preprocess a manifest-described dataset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--correspondences", help="four 'sx sy tx ty' lines; computes the dataset homography")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("train", help="train one method")
    s.add_argument("--method")
    s.add_argument("--direction")
    s.add_argument("--seed", type=int)
    s.add_argument("--preset")
    s.add_argument("--config", help="key=value or JSON file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--data", required=True)
    s.add_argument("--limit", type=int, help="use only the first N training samples")
    s.add_argument("--out", help="run directory (default runs/train-<method>-<preset>)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="run a trained checkpoint over a split")
    s.add_argument("--checkpoint", required=True, help="checkpoint file or training run directory")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "test"))
    s.add_argument("--limit", type=int)
    s.add_argument("--out", help="output directory (default runs/synth-<method>)")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("warp", help="warp an image by a homography")
    s.add_argument("--image", required=True)
    s.add_argument("--homography")
    s.add_argument("--correspondences")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("composite", help="paste inpaint and car regions into a warped image")
    s.add_argument("--inpaint", required=True)
    s.add_argument("--car", required=True)
    s.add_argument("--warped", required=True)
    s.add_argument("--masks", help="directory with m1.png, m2.png, band.png")
    s.add_argument("--band-width", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_composite)

    s = sub.add_parser("evaluate", help="compute the metric battery")
    s.add_argument("--fake", required=True)
    s.add_argument("--real", required=True)
    s.add_argument("--classifier")
    s.add_argument("--precomputed", help="directory with {real,fake}_{probs,acts}.txt")
    s.add_argument("--method")
    s.add_argument("--kl-batches", type=int, default=10)
    s.add_argument("--out", help="output directory (default runs/eval-<method>)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="compare evaluated runs")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--inputs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("train-classifier", help="fit the synthetic scene classifier")
    s.add_argument("--n", type=int, default=600)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=400)
    s.add_argument("--size", type=int, default=64, choices=(64, 256))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_classifier)
    return p


def _category(exc: Exception) -> str:
    from .dataman import DatasetError
    from .geometry import GeometryError
    from .metrics import MetricError
    from .nets import SpecError
    from .trainer import CheckpointError, ConfigError, TrainingDiverged

    for cls, name in ((CommandError, None), (ConfigError, "config"), (SpecError, "config"),
                      (DatasetError, "data"), (GeometryError, "geometry"), (MetricError, "metric"),
                      (CheckpointError, "checkpoint"), (TrainingDiverged, "diverged"),
                      (FileNotFoundError, "io"), (OSError, "io")):
        if isinstance(exc, cls):
            return name or exc.category
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as one machine-parsable line
        msg = str(exc).replace("\n", " ")
        print(f"error: {_category(exc)}: {msg}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
