"""Command-line pipeline: dataset prep, training, sensing, restoration,
evaluation and artifact management.

Every command validates its inputs first, then writes a run manifest
(run.json) into the output directory before producing artifacts, and
finishes by filling in the wall time.  A global --seed feeds one root
sequence from which every per-image generator derives, so reruns with
the same arguments reproduce all artifacts byte for byte (manifest
wall times and report runtime columns excepted).

Exit codes: 0 success, 2 invalid arguments, 3 I/O failure,
4 numerical failure.
"""

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, datasets, evaluation, prior, sampler, sensing, trainer
from .errors import (
    DataFileError,
    InvalidInputError,
    ModelFileError,
    NumericalError,
)

_SOLVER_NAMES = {
    "auto": "auto",
    "cholesky": "dense_cholesky",
    "cg": "conjugate_gradient",
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated sweep settings for restoration-style commands.

    ``snr_values`` entries are decibel figures or None for noiseless.
    """

    mr_values: tuple
    snr_values: tuple
    iterations: int
    burn_in: int

    def __post_init__(self):
        if not self.mr_values:
            raise InvalidInputError("at least one measurement ratio is required")
        for mr in self.mr_values:
            if not 0.0 < mr <= 1.0:
                raise InvalidInputError(
                    f"measurement ratio {mr} outside (0, 1]"
                )
        for snr in self.snr_values:
            if snr is not None and not np.isfinite(snr):
                raise InvalidInputError("snr values must be finite or none")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be at least one")
        if not 0 <= self.burn_in < self.iterations:
            raise InvalidInputError(
                "burn-in must be non-negative and below iterations"
            )

    @property
    def combos(self):
        return [(mr, snr) for mr in self.mr_values for snr in self.snr_values]


def _parse_float_list(text):
    try:
        values = tuple(float(part) for part in str(text).split(","))
    except ValueError as exc:
        raise InvalidInputError(f"cannot parse float list {text!r}") from exc
    return values


def _parse_snr_list(text):
    if text is None:
        return (None,)
    values = []
    for part in str(text).split(","):
        part = part.strip().lower()
        if part in ("none", "noiseless"):
            values.append(None)
        else:
            try:
                values.append(float(part))
            except ValueError as exc:
                raise InvalidInputError(
                    f"cannot parse snr entry {part!r}"
                ) from exc
    return tuple(values)


def _parse_size(text):
    parts = str(text).lower().split("x")
    try:
        if len(parts) == 1:
            h = w = int(parts[0])
        elif len(parts) == 2:
            h, w = int(parts[0]), int(parts[1])
        else:
            raise ValueError(text)
    except ValueError as exc:
        raise InvalidInputError(f"cannot parse size {text!r}") from exc
    if h < 1 or w < 1:
        raise InvalidInputError("size must be positive")
    return h, w


def _require(args, *names):
    """Presence check deferred past config-file merging."""
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise InvalidInputError(f"missing required arguments: {flags}")


def _seed_words(seed, count):
    """Deterministic per-artifact integer seeds derived from the root."""
    if count == 0:
        return []
    words = np.random.SeedSequence(int(seed)).generate_state(
        count, dtype=np.uint64
    )
    return [int(w) for w in words]


def _solver_options(args):
    return sampler.SolverOptions(
        method=_SOLVER_NAMES[args.solver],
        ridge=args.ridge,
        cg_max_iters=args.cg_max_iters,
    )


def _load_model_arg(args):
    has_preset = getattr(args, "preset", None) is not None
    has_model = getattr(args, "model", None) is not None
    if has_preset == has_model:
        raise InvalidInputError("give exactly one of --preset or --model")
    if has_preset:
        return prior.preset_model(args.preset, seed=args.seed)
    return prior.load_model(args.model)


# ---------------------------------------------------------------------------
# run manifests


def _json_ready(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def _start_manifest(out_dir, command, args):
    out_dir.mkdir(parents=True, exist_ok=True)
    config = {
        k: _json_ready(v)
        for k, v in sorted(vars(args).items())
        if k not in ("handler", "command")
    }
    doc = {
        "command": command,
        "tool_version": __version__,
        "config": config,
        "wall_time_s": None,
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path, doc, time.perf_counter()


def _finish_manifest(path, doc, started, **extra):
    doc.update(extra)
    doc["wall_time_s"] = time.perf_counter() - started
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def _cmd_extract(args):
    _require(args, "out", "images_dir")
    images = datasets.load_images(args.images_dir)
    out = Path(args.out)
    manifest, doc, started = _start_manifest(out, "extract", args)
    dataset = trainer.extract_patches(
        images,
        patch_size=args.patch_size,
        stride=args.stride,
        seed=args.seed,
        max_patches=args.max_patches,
    )
    trainer.save_dataset(dataset, out)
    _finish_manifest(
        manifest, doc, started,
        patches=len(dataset), skipped=list(dataset.skipped),
    )
    print(f"extracted {len(dataset)} patches "
          f"({len(dataset.skipped)} images skipped) -> {out}")
    return 0


def _cmd_train(args):
    _require(args, "out", "dataset")
    model = _load_model_arg(args)
    dataset = trainer.load_dataset(args.dataset)
    config = trainer.TrainingConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        cd_steps=args.cd_steps,
        stop_threshold=args.stop_threshold,
        max_epochs=args.epochs,
        seed=args.seed,
        holdout_fraction=args.holdout_fraction,
        model_selection=not args.no_model_selection,
        persistent=args.persistent,
        histogram_bins=args.bins,
        solver=_solver_options(args),
    )
    out = Path(args.out)
    manifest, doc, started = _start_manifest(out, "train", args)
    trained, trace = trainer.train(
        model, dataset, config, trace_path=out / "trace.csv"
    )
    prior.save_model(trained, out / "model.json")
    _finish_manifest(
        manifest, doc, started,
        trainable_parameters=prior.trainable_parameter_count(trained),
        epochs_run=len(trace.records),
    )
    print(f"trained {len(trace.records)} epochs -> {out / 'model.json'}")
    return 0


def _cmd_sample(args):
    _require(args, "out")
    model = _load_model_arg(args)
    shape = _parse_size(args.size)
    if args.count < 1:
        raise InvalidInputError("count must be at least one")
    out = Path(args.out)
    manifest, doc, started = _start_manifest(out, "sample", args)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    start = rng.random((args.count, *shape))
    images = sampler.run_prior_chain(
        model, start, args.sweeps, options=_solver_options(args), rng=rng
    )
    np.save(out / "samples.npy", images)
    _finish_manifest(manifest, doc, started, samples=int(args.count))
    print(f"wrote {args.count} prior samples -> {out / 'samples.npy'}")
    return 0


def _cmd_measure(args):
    _require(args, "out", "images_dir", "mr")
    mr = float(args.mr)
    if not 0.0 < mr <= 1.0:
        raise InvalidInputError(f"measurement ratio {mr} outside (0, 1]")
    images = datasets.load_images(args.images_dir)
    out = Path(args.out)
    manifest, doc, started = _start_manifest(out, "measure", args)
    words = _seed_words(args.seed, 2 * len(images))
    written = []
    for i, (name, image) in enumerate(images):
        m = sensing.measurement_count_for_ratio(image.size, mr)
        operator = sensing.make_gaussian_matrix(m, image.size, words[2 * i])
        record = sensing.measure(operator, image)
        if args.snr_db is not None:
            record = sensing.add_noise_snr(record, args.snr_db,
                                           words[2 * i + 1])
        path = out / (Path(name).stem + ".json")
        sensing.save_record(record, path)
        written.append({"file": path.name, "n_measurements": m})
    _finish_manifest(manifest, doc, started, measurements=written)
    print(f"measured {len(written)} images -> {out}")
    return 0


def _combo_dir(out, mr, snr):
    tag = f"mr{mr:g}_snr" + ("none" if snr is None else f"{snr:g}")
    return out / tag


def _restore_one(model, record, options, rng, args):
    operator = sensing.operator_for_record(record)
    result = sampler.run_restoration_chain(
        model,
        operator.matrix,
        record.y,
        record.image_shape,
        iterations=int(args.iterations),
        burn_in=int(args.burn_in),
        options=options,
        rng=rng,
        init="random" if args.random_init else "adjoint",
        last_sample=args.last_sample,
    )
    return result


def _write_restored(directory, stem, image, diagnostics=None):
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / f"{stem}.npy", image)
    datasets.write_image(directory / f"{stem}.png",
                         np.clip(image, 0.0, 1.0))
    if diagnostics is not None:
        (directory / f"{stem}_diagnostics.csv").write_text(
            sampler.diagnostics_to_csv(diagnostics)
        )


def _cmd_restore(args):
    _require(args, "out")
    model = _load_model_arg(args)
    exp = ExperimentConfig(
        mr_values=_parse_float_list(args.mr) if args.mr else (),
        snr_values=_parse_snr_list(args.snr_db),
        iterations=int(args.iterations),
        burn_in=int(args.burn_in),
    )
    if bool(args.images_dir) == bool(args.measurements):
        raise InvalidInputError(
            "give exactly one of --images-dir or --measurements"
        )
    options = _solver_options(args)
    out = Path(args.out)
    rows = []
    if args.images_dir:
        images = datasets.load_images(args.images_dir)
        manifest, doc, started = _start_manifest(out, "restore", args)
        combos = exp.combos
        words = _seed_words(args.seed, 3 * len(combos) * len(images))
        lengths = []
        for ci, (mr, snr) in enumerate(combos):
            directory = _combo_dir(out, mr, snr)
            for ii, (name, image) in enumerate(images):
                base = 3 * (ci * len(images) + ii)
                m = sensing.measurement_count_for_ratio(image.size, mr)
                operator = sensing.make_gaussian_matrix(
                    m, image.size, words[base]
                )
                record = sensing.measure(operator, image)
                if snr is not None:
                    record = sensing.add_noise_snr(record, snr,
                                                   words[base + 1])
                rng = np.random.default_rng(words[base + 2])
                t0 = time.perf_counter()
                result = _restore_one(model, record, options, rng, args)
                elapsed = time.perf_counter() - t0
                stem = Path(name).stem
                _write_restored(directory, stem, result.image,
                                result.diagnostics)
                rows.append(evaluation.ReportRow(
                    image_id=name, method="gibbs", measurement_ratio=mr,
                    snr_db=snr,
                    psnr_db=evaluation.psnr(image, result.image, peak=1.0),
                    ssim=evaluation.ssim(image, result.image),
                    wall_time_s=elapsed, seed=words[base + 2],
                ))
                lengths.append({"image": name, "mr": mr,
                                "n_measurements": m})
    else:
        record_paths = sorted(Path(args.measurements).glob("*.json"))
        record_paths = [p for p in record_paths if p.name != "run.json"]
        if not record_paths:
            raise DataFileError(
                f"no measurement records in {args.measurements}"
            )
        manifest, doc, started = _start_manifest(out, "restore", args)
        words = _seed_words(args.seed, len(record_paths))
        lengths = []
        for i, path in enumerate(record_paths):
            record = sensing.load_record(path)
            rng = np.random.default_rng(words[i])
            t0 = time.perf_counter()
            result = _restore_one(model, record, options, rng, args)
            elapsed = time.perf_counter() - t0
            _write_restored(out, path.stem, result.image, result.diagnostics)
            rows.append(evaluation.ReportRow(
                image_id=path.name, method="gibbs",
                measurement_ratio=record.n_measurements / record.n_pixels,
                snr_db=record.snr_db, psnr_db=float("nan"),
                ssim=float("nan"), wall_time_s=elapsed, seed=words[i],
            ))
            lengths.append({"image": path.name,
                            "n_measurements": record.n_measurements})
    report = evaluation.build_report(rows)
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.json").write_text(
        json.dumps(report.aggregates, indent=1, sort_keys=True) + "\n"
    )
    _finish_manifest(manifest, doc, started, measurements=lengths)
    print(f"restored {len(rows)} images -> {out}")
    return 0


def _cmd_baseline(args):
    _require(args, "out", "images_dir")
    exp = ExperimentConfig(
        mr_values=_parse_float_list(args.mr) if args.mr else (),
        snr_values=_parse_snr_list(args.snr_db),
        iterations=int(args.ista_iterations),
        burn_in=0,
    )
    images = datasets.load_images(args.images_dir)
    out = Path(args.out)
    manifest, doc, started = _start_manifest(out, "baseline", args)
    combos = exp.combos
    words = _seed_words(args.seed, 2 * len(combos) * len(images))
    rows = []
    for ci, (mr, snr) in enumerate(combos):
        directory = _combo_dir(out, mr, snr)
        for ii, (name, image) in enumerate(images):
            base = 2 * (ci * len(images) + ii)
            m = sensing.measurement_count_for_ratio(image.size, mr)
            operator = sensing.make_gaussian_matrix(m, image.size,
                                                    words[base])
            record = sensing.measure(operator, image)
            if snr is not None:
                record = sensing.add_noise_snr(record, snr, words[base + 1])
            t0 = time.perf_counter()
            x, objectives = evaluation.lasso_ista(
                operator.matrix, record.y, lam=args.lam,
                iterations=int(args.ista_iterations),
                power_iters=int(args.power_iters),
            )
            elapsed = time.perf_counter() - t0
            restored = x.reshape(record.image_shape)
            stem = Path(name).stem
            _write_restored(directory, stem, restored)
            obj_text = "\n".join(
                f"{k} {float(v)!r}" for k, v in enumerate(objectives)
            )
            (directory / f"{stem}_objectives.txt").write_text(obj_text + "\n")
            rows.append(evaluation.ReportRow(
                image_id=name, method="lasso", measurement_ratio=mr,
                snr_db=snr,
                psnr_db=evaluation.psnr(image, restored, peak=1.0),
                ssim=evaluation.ssim(image, restored),
                wall_time_s=elapsed, seed=words[base],
            ))
    report = evaluation.build_report(rows)
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.json").write_text(
        json.dumps(report.aggregates, indent=1, sort_keys=True) + "\n"
    )
    _finish_manifest(manifest, doc, started)
    print(f"baseline restored {len(rows)} images -> {out}")
    return 0


def _cmd_eval(args):
    _require(args, "out", "restored_dir", "reference_dir")
    restored = datasets.load_images(args.restored_dir)
    reference = datasets.load_images(args.reference_dir)
    restored_names = [name for name, _ in restored]
    reference_names = [name for name, _ in reference]
    if restored_names != reference_names:
        only_restored = sorted(set(restored_names) - set(reference_names))
        only_reference = sorted(set(reference_names) - set(restored_names))
        raise InvalidInputError(
            "directories do not pair up; only in restored: "
            f"{only_restored}; only in reference: {only_reference}"
        )
    out = Path(args.out)
    manifest, doc, started = _start_manifest(out, "eval", args)
    rows = []
    for (name, rest), (_, ref) in zip(restored, reference):
        rows.append(evaluation.ReportRow(
            image_id=name, method=args.label, measurement_ratio=float("nan"),
            snr_db=None, psnr_db=evaluation.psnr(ref, rest, peak=1.0),
            ssim=evaluation.ssim(ref, rest), wall_time_s=0.0, seed=args.seed,
        ))
    report = evaluation.build_report(rows)
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.json").write_text(
        json.dumps(report.aggregates, indent=1, sort_keys=True) + "\n"
    )
    _finish_manifest(manifest, doc, started, images=len(rows))
    print(f"evaluated {len(rows)} image pairs -> {out}")
    return 0


def _cmd_kld(args):
    _require(args, "out", "dataset")
    model = _load_model_arg(args)
    dataset = trainer.load_dataset(args.dataset)
    if len(dataset) == 0:
        raise InvalidInputError("dataset holds no patches")
    out = Path(args.out)
    manifest, doc, started = _start_manifest(out, "kld", args)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    data_hist = evaluation.response_histogram(
        model, dataset.patches, bins=args.bins
    )
    drawn = sampler.run_prior_chain(
        model, dataset.patches, args.sweeps,
        options=_solver_options(args), rng=rng,
    )
    model_hist = evaluation.response_histogram(
        model, drawn, edges=data_hist.edges
    )
    value = evaluation.kld(data_hist, model_hist)
    (out / "data_histogram.txt").write_text(data_hist.to_text())
    (out / "model_histogram.txt").write_text(model_hist.to_text())
    (out / "kld.json").write_text(json.dumps({
        "kld_nats": value,
        "bins": int(args.bins),
        "sweeps": int(args.sweeps),
        "mass_floor": 1e-12,
    }, indent=1, sort_keys=True) + "\n")
    _finish_manifest(manifest, doc, started, kld_nats=value)
    print(f"kld {value:.6f} nats -> {out / 'kld.json'}")
    return 0


def _cmd_spectrum(args):
    _require(args, "out")
    model = _load_model_arg(args)
    out = Path(args.out)
    manifest, doc, started = _start_manifest(out, "spectrum", args)
    common = dict(samples=int(args.samples), half_range=args.half_range)
    files = []
    for kind in ("relu", "arctan"):
        mags = evaluation.activation_spectrum(kind, **common)
        (out / f"{kind}.txt").write_text(evaluation.spectrum_to_text(mags))
        files.append(f"{kind}.txt")
    for m in range(model.num_filters):
        mags = evaluation.activation_spectrum(
            "gmm", model=model, filter_index=m, **common
        )
        name = f"gmm_filter{m:03d}.txt"
        (out / name).write_text(evaluation.spectrum_to_text(mags))
        files.append(name)
    _finish_manifest(manifest, doc, started, files=files)
    print(f"wrote {len(files)} spectra -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="gibbscs",
        description="Gibbs-prior compressed sensing pipeline",
    )
    sub = parser.add_subparsers(dest="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="root seed for all derived generators")
    common.add_argument("--out", default=None,
                        help="output directory")
    common.add_argument("--config", default=None,
                        help="JSON file with defaults; flags override it")

    chain = argparse.ArgumentParser(add_help=False)
    chain.add_argument("--solver", choices=sorted(_SOLVER_NAMES),
                       default="auto",
                       help="linear solver for the Gaussian draws")
    chain.add_argument("--ridge", type=float, default=1e-8,
                       help="diagonal added to the precision matrix")
    chain.add_argument("--cg-max-iters", type=int, default=None)

    source = argparse.ArgumentParser(add_help=False)
    source.add_argument("--preset", choices=sorted(prior.PRESETS),
                        default=None)
    source.add_argument("--model", default=None,
                        help="path to a saved model file")

    p = sub.add_parser("extract", parents=[common],
                       help="cut a directory of images into patches")
    p.add_argument("--images-dir", default=None)
    p.add_argument("--patch-size", type=int, default=20)
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--max-patches", type=int, default=None)
    p.set_defaults(handler=_cmd_extract)

    p = sub.add_parser("train", parents=[common, chain, source],
                       help="contrastive-divergence training")
    p.add_argument("--dataset", default=None)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--cd-steps", type=int, default=1,
                   help="model-chain sweeps per gradient estimate")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--stop-threshold", type=float, default=1e-5,
                   help="stop when the update norm falls below this")
    p.add_argument("--holdout-fraction", type=float, default=0.1)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--no-model-selection", action="store_true",
                   help="keep the last epoch instead of the best-scoring one")
    p.add_argument("--persistent", action="store_true",
                   help="carry model-chain state across batches")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("sample", parents=[common, chain, source],
                       help="draw images from the prior")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", default="32")
    p.add_argument("--sweeps", type=int, default=50)
    p.set_defaults(handler=_cmd_sample)

    p = sub.add_parser("measure", parents=[common],
                       help="compress images into measurement records")
    p.add_argument("--images-dir", default=None)
    p.add_argument("--mr", type=float, default=None,
                   help="measurement ratio in (0, 1]")
    p.add_argument("--snr-db", type=float, default=None,
                   help="measurement noise level; omit for noiseless")
    p.set_defaults(handler=_cmd_measure)

    p = sub.add_parser("restore", parents=[common, chain, source],
                       help="restore images from measurements")
    p.add_argument("--images-dir", default=None)
    p.add_argument("--measurements", default=None,
                   help="directory of measurement records")
    p.add_argument("--mr", default="0.25",
                   help="comma-separated measurement ratios")
    p.add_argument("--snr-db", default=None,
                   help="comma-separated SNRs in dB; 'none' is noiseless")
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--burn-in", type=int, default=100)
    p.add_argument("--last-sample", action="store_true",
                   help="report the final draw instead of the average")
    p.add_argument("--random-init", action="store_true",
                   help="start chains from noise instead of the adjoint")
    p.set_defaults(handler=_cmd_restore)

    p = sub.add_parser("baseline", parents=[common],
                       help="ISTA-LASSO restoration baseline")
    p.add_argument("--images-dir", default=None)
    p.add_argument("--mr", default="0.25")
    p.add_argument("--snr-db", default=None)
    p.add_argument("--lam", type=float, default=0.01,
                   help="soft-threshold weight")
    p.add_argument("--ista-iterations", type=int, default=500)
    p.add_argument("--power-iters", type=int, default=10000,
                   help="budget for the spectral-norm power iteration")
    p.set_defaults(handler=_cmd_baseline)

    p = sub.add_parser("eval", parents=[common],
                       help="score restored images against references")
    p.add_argument("--restored-dir", default=None)
    p.add_argument("--reference-dir", default=None)
    p.add_argument("--label", default="gibbs")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("kld", parents=[common, chain, source],
                       help="response-histogram divergence of a model")
    p.add_argument("--dataset", default=None)
    p.add_argument("--sweeps", type=int, default=50)
    p.add_argument("--bins", type=int, default=64)
    p.set_defaults(handler=_cmd_kld)

    p = sub.add_parser("spectrum", parents=[common, source],
                       help="activation magnitude spectra")
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--half-range", type=float, default=10.0)
    p.set_defaults(handler=_cmd_spectrum)

    commands = {name: sp for name, sp in sub.choices.items()}
    return parser, commands


def _reparse_with_config(parser, command_parser, argv, config_path):
    path = Path(config_path)
    if not path.is_file():
        raise DataFileError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except ValueError as exc:
        raise InvalidInputError(f"malformed config file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidInputError("config file must hold a JSON object")
    valid = {a.dest for a in command_parser._actions if a.dest != "help"}
    unknown = sorted(set(doc) - valid)
    if unknown:
        raise InvalidInputError(f"unknown config keys: {unknown}")
    command_parser.set_defaults(**doc)
    return parser.parse_args(argv)


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    argv = list(argv)
    parser, commands = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            args = _reparse_with_config(
                parser, commands[args.command], argv, args.config
            )
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFileError, ModelFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    if not getattr(args, "handler", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.handler(args) or 0
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (DataFileError, ModelFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
