"""Command-line entry point: ``rawdiff <command> [options]``.

Commands
    gen-scenes  procedural clean scenes as ``.r4`` files
    synth       short-exposure noisy frames from clean ones, plus a pairs manifest
    pretrain    pre-training over virtual cameras (resumable)
    align       aligning on real pairs with frozen convs (resumable)
    reparam     fold CFI^T into the convolutions
    enhance     enhance a single ``.r4`` frame
    eval        enhance every pair of a manifest and write a JSONL report

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import noisespace, rawproc, sampler_eval, scenes, schedule, trainer
from .color_corrector import ColorCorrector
from .denoiser import Denoiser, DenoiserConfig

logger = logging.getLogger("rawdiff")

CONFIG_SCHEMA = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "pairs.tsv"
PATH_ENV = {"noise_space": "RAWDIFF_NOISE_SPACE", "data_dir": "RAWDIFF_DATA_DIR",
            "checkpoint_dir": "RAWDIFF_CHECKPOINT_DIR"}


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class RunConfig:
    noise_space: str = ""  # empty selects the packaged default space
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    T: int = 200
    alpha_1: float = 0.999999
    alpha_T: float = 0.95
    eta: float = 0.0
    n_cameras: int = 5
    width: int = 32
    temb_dim: int = 64
    seed: int = 0
    train: trainer.TrainConfig = dataclasses.field(default_factory=trainer.TrainConfig)

    def validate(self) -> None:
        if self.n_cameras < 1:
            raise ConfigError("n_cameras must be >= 1")
        if self.width < 1 or self.temb_dim < 2 or self.temb_dim % 2:
            raise ConfigError("width must be >= 1 and temb_dim a positive even number")
        try:
            self.schedule()
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from None

    def schedule(self, eta: Optional[float] = None) -> schedule.DiffusionSchedule:
        return schedule.build(self.T, self.alpha_1, self.alpha_T, self.eta if eta is None else eta)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(width=self.width, temb_dim=self.temb_dim, n_cameras=self.n_cameras)

    def space(self) -> noisespace.NoiseSpace:
        if self.noise_space:
            return noisespace.load_space(self.noise_space)
        return noisespace.default_space()


_SECTIONS = {
    "meta": {"schema_version": int},
    "paths": {"noise_space": str, "data_dir": str, "checkpoint_dir": str},
    "schedule": {"T": int, "alpha_1": float, "alpha_T": float, "eta": float},
    "model": {"n_cameras": int, "width": int, "temb_dim": int},
    "run": {"seed": int},
    "train": {f.name: f.type for f in dataclasses.fields(trainer.TrainConfig) if f.name != "seed"},
}


def _convert(kind, raw: str, where: str):
    kind = {"int": int, "float": float, "str": str}.get(kind, kind) if isinstance(kind, str) else kind
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        # milestones: comma-separated integers
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    """Parse an INI-style run configuration; unknown sections and keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = [s for s in cp.sections() if s not in _SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    version = cp.get("meta", "schema_version", fallback=None)
    if version is None:
        raise ConfigError("missing [meta] schema_version")
    if version.strip() != str(CONFIG_SCHEMA):
        raise ConfigError(f"config schema {version.strip()} not supported (expected {CONFIG_SCHEMA})")
    cfg = RunConfig()
    train_kwargs = {}
    for section in cp.sections():
        fields = _SECTIONS[section]
        for key, raw in cp.items(section):
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            value = _convert(fields[key], raw.strip(), f"[{section}] {key}")
            if section == "meta":
                continue
            if section == "train":
                train_kwargs[key] = value
            else:
                setattr(cfg, key, value)
    try:
        cfg.train = trainer.TrainConfig(**train_kwargs, seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from None
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Effective configuration as text that :func:`parse_config` reads back identically."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["meta"] = {"schema_version": str(CONFIG_SCHEMA)}
    for section in ("paths", "schedule", "model", "run"):
        cp[section] = {k: _format(getattr(cfg, k)) for k in _SECTIONS[section]}
    cp["train"] = {k: _format(getattr(cfg.train, k)) for k in _SECTIONS["train"]}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _format(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = parse_config(text)
    else:
        cfg = RunConfig()
    for key, env in PATH_ENV.items():
        if os.environ.get(env):
            setattr(cfg, key, os.environ[env])
    if seed is not None:
        cfg.seed = seed
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
    return cfg


# ---------------------------------------------------------------------------
# datasets


def read_packed(path) -> tuple[np.ndarray, rawproc.RawImage]:
    raw = rawproc.read_r4(path)
    return rawproc.pack(raw), raw


def list_r4(path) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise DataError(f"no such file or directory: {p}")
    files = sorted(p.glob("*.r4"))
    if not files:
        raise DataError(f"no .r4 files in {p}")
    return files


def load_clean_dir(path) -> np.ndarray:
    frames = [read_packed(f)[0] for f in list_r4(path)]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DataError(f"clean frames in {path} differ in size: {sorted(shapes)}")
    return np.stack(frames)


def write_manifest(path, rows: Sequence[tuple[str, str, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# noisy\tclean\tratio\n")
        for noisy, clean, ratio in rows:
            fh.write(f"{noisy}\t{clean}\t{ratio!r}\n")


def read_manifest(path) -> tuple[list[tuple[np.ndarray, np.ndarray, float]], list[str]]:
    """Load (noisy, clean, ratio) triples; paths are relative to the manifest."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    pairs, names = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            ratio = float(parts[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad ratio {parts[2]!r}") from None
        noisy = read_packed(path.parent / parts[0])[0]
        clean = read_packed(path.parent / parts[1])[0]
        if noisy.shape != clean.shape:
            raise DataError(f"{path}:{lineno}: noisy {noisy.shape} and clean {clean.shape} differ")
        pairs.append((noisy, clean, ratio))
        names.append(parts[0])
    if not pairs:
        raise DataError(f"manifest {path} lists no pairs")
    return pairs, names


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scenes(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    for k in range(args.count):
        packed = scenes.generate_scene(args.size, rng)
        raw = rawproc.unpack(packed, camera_id="clean")
        rawproc.write_r4(out / f"scene_{k:04d}.r4", raw)
    logger.info("wrote %d scenes to %s", args.count, out)
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    space = noisespace.load_space(args.space) if args.space else cfg.space()
    cams = noisespace.partition(space, cfg.n_cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for f in list_r4(args.input):
        clean, raw = read_packed(f)
        if args.camera in (None, "random"):
            cam = cams[int(rng.integers(0, len(cams)))]
        else:
            cam = cams[_camera_index(args.camera, len(cams)) - 1]
        params = noisespace.sample_params(cam, space, rng)
        if args.ratio is not None:
            params = dataclasses.replace(params, ratio=float(args.ratio))
        noisy = noisespace.synthesize(clean, params, rng, data_range=raw.data_range)
        meta = rawproc.unpack(noisy, raw.pattern, raw.black_level, raw.white_level,
                              exposure_ratio=params.ratio, camera_id=f"virtual-{cam.index}")
        rawproc.write_r4(out / f.name, meta)
        rows.append((f.name, os.path.relpath(f.resolve(), out.resolve()), params.ratio))
    write_manifest(out / MANIFEST_NAME, rows)
    logger.info("synthesized %d frames into %s", len(rows), out)
    return EXIT_OK


def _camera_index(value: str, n: int) -> int:
    try:
        i = int(value)
    except ValueError:
        raise UsageError(f"--camera must be an integer or 'random', got {value!r}") from None
    if not 1 <= i <= n:
        raise UsageError(f"--camera must be in 1..{n}, got {i}")
    return i


def _checkpoint_path(args, cfg: RunConfig, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfg.checkpoint_dir) / default_name


def _load_bundle(path) -> trainer.CheckpointBundle:
    if not path:
        raise UsageError("--checkpoint is required")
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} does not exist")
    return trainer.load(path)


def _config_from_bundle(bundle: trainer.CheckpointBundle, fallback: RunConfig) -> RunConfig:
    text = bundle.manifest.get("config")
    return parse_config(text) if text else fallback


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _checkpoint_path(args, cfg, "pretrain.ck")
    data = load_clean_dir(args.data or cfg.data_dir)
    if args.checkpoint:
        bundle = _load_bundle(args.checkpoint)
        if bundle.manifest.get("stage") != "pretrain":
            raise DataError(f"{args.checkpoint} is a {bundle.manifest.get('stage')!r} checkpoint; "
                            "pretraining resumes only from a pretrain checkpoint")
        cfg = _config_from_bundle(bundle, cfg)
        model, cc, sched, opt = trainer.restore(bundle)
        rng = trainer.restore_rng(bundle, cfg.seed)
    else:
        model = Denoiser(cfg.denoiser_config(), seed=cfg.seed)
        cc = ColorCorrector(seed=cfg.seed)
        sched, opt, rng = cfg.schedule(), None, np.random.default_rng(cfg.seed)
    space = cfg.space()
    cams = noisespace.partition(space, cfg.n_cameras)
    log: list = []
    opt = trainer.run_pretrain(model, cc, sched, data, cams, space, cfg.train, opt=opt, rng=rng,
                               iters=args.iters, log=log)
    _save(out, trainer.bundle_from(model, cc, sched, opt, "pretrain", {"config": dump_config(cfg)}, rng))
    trainer.write_log(out.with_suffix(".log.jsonl"), log)
    logger.info("pretrain checkpoint at iteration %d written to %s", opt.iteration, out)
    return EXIT_OK


def cmd_align(args, cfg: RunConfig) -> int:
    out = _checkpoint_path(args, cfg, "align.ck")
    bundle = _load_bundle(args.checkpoint)
    stage, mode = bundle.manifest.get("stage"), bundle.manifest.get("mode")
    if mode == "merged":
        raise DataError(f"{args.checkpoint} is reparameterized (merged); align the pretrain or aligned "
                        "checkpoint it came from instead")
    if stage not in ("pretrain", "align"):
        raise DataError(f"{args.checkpoint} has stage {stage!r}; align needs a pretrain checkpoint")
    # an explicit --config supplies the aligning hyper-parameters, else the checkpoint's
    if not args.config:
        cfg = _config_from_bundle(bundle, cfg)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    model, cc, sched, opt = trainer.restore(bundle)
    if stage == "pretrain":
        opt, rng = None, np.random.default_rng([cfg.seed, 1])
    else:
        rng = trainer.restore_rng(bundle, cfg.seed)
    pairs, _ = read_manifest(args.manifest)
    log: list = []
    opt = trainer.run_align(model, cc, sched, pairs, cfg.train, opt=opt, rng=rng, iters=args.iters, log=log)
    _save(out, trainer.bundle_from(model, cc, sched, opt, "align", {"config": dump_config(cfg)}, rng))
    trainer.write_log(out.with_suffix(".log.jsonl"), log)
    logger.info("aligned checkpoint at iteration %d written to %s", opt.iteration, out)
    return EXIT_OK


def cmd_reparam(args, cfg: RunConfig) -> int:
    out = _checkpoint_path(args, cfg, "merged.ck")
    bundle = _load_bundle(args.checkpoint)
    if bundle.manifest.get("mode") != "aligned":
        raise DataError(f"reparam needs an aligned checkpoint, {args.checkpoint} is "
                        f"{bundle.manifest.get('mode')!r}; run align first")
    model, cc, sched, _ = trainer.restore(bundle)
    model.reparameterize()
    extra = {"config": bundle.manifest.get("config", dump_config(cfg))}
    _save(out, trainer.bundle_from(model, cc, sched, None, "merged", extra))
    logger.info("merged checkpoint written to %s", out)
    return EXIT_OK


def _inference_setup(args, cfg: RunConfig):
    bundle = _load_bundle(args.checkpoint)
    model, cc, sched, _ = trainer.restore(bundle)
    if args.eta is not None:
        sched = schedule.build(sched.T, sched.alpha_1, sched.alpha_T, args.eta)
    camera = None
    if model.mode == "pretrain":
        if args.camera is None:
            raise UsageError("a pretrain checkpoint needs --camera to pick a CFI pathway")
        camera = _camera_index(args.camera, model.cfg.n_cameras)
    return model, cc, sched, camera


def _check_finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("enhanced output contains NaN or Inf")


def cmd_enhance(args, cfg: RunConfig) -> int:
    model, cc, sched, camera = _inference_setup(args, cfg)
    packed, raw = read_packed(args.input)
    ratio = float(args.ratio) if args.ratio is not None else raw.exposure_ratio
    rng = np.random.default_rng(cfg.seed)
    out = sampler_eval.enhance(packed, ratio, model, cc, sched, rng, camera=camera)
    _check_finite(out)
    dest = Path(args.out) if args.out else Path(args.input).with_suffix(".enhanced.r4")
    rawproc.write_r4(dest, rawproc.unpack(out, raw.pattern, raw.black_level, raw.white_level,
                                          camera_id=raw.camera_id))
    if args.preview:
        sampler_eval.save_preview(args.preview, out)
    logger.info("enhanced %s -> %s", args.input, dest)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model, cc, sched, camera = _inference_setup(args, cfg)
    pairs, names = read_manifest(args.manifest)
    outputs: list = []
    rep = sampler_eval.evaluate(pairs, model, None if args.no_cc else cc, sched, seed=cfg.seed,
                                camera=camera, names=names, outputs=outputs)
    for o in outputs:
        _check_finite(o)
    dest = Path(args.out) if args.out else Path(cfg.checkpoint_dir) / "report.jsonl"
    dest.parent.mkdir(parents=True, exist_ok=True)
    rep.write(dest)
    s = rep.summary()
    print(f"{s['count']} images  PSNR {s['psnr_mean']:.2f} dB (input {s['input_psnr_mean']:.2f})  "
          f"SSIM {s['ssim_mean']:.4f}  color error {s['color_error_mean']:.4f}")
    return EXIT_OK


def _save(path: Path, bundle: trainer.CheckpointBundle) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    trainer.save(bundle, path)


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (INI); defaults apply when omitted")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="rawdiff", description="Two-stage pyramid diffusion for low-light RAW frames.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scenes", parents=[common], help="write procedural clean scenes")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--size", type=int, default=64, help="mosaic side length, divisible by 4")

    s = sub.add_parser("synth", parents=[common], help="synthesize short exposures and a pairs manifest")
    s.add_argument("input", help="clean .r4 file or directory")
    s.add_argument("--space", help="noise-space file (default: configured or packaged)")
    s.add_argument("--camera", help="virtual camera index (1-based) or 'random'")
    s.add_argument("--ratio", type=float, help="fixed exposure ratio instead of sampling one")

    t = sub.add_parser("pretrain", parents=[common], help="pre-train over virtual cameras")
    t.add_argument("--data", help="directory of clean .r4 frames (default: configured data_dir)")
    t.add_argument("--checkpoint", help="resume from this pretrain checkpoint")
    t.add_argument("--iters", type=int, help="run at most this many iterations now")

    a = sub.add_parser("align", parents=[common], help="align CFI^T and the color corrector on real pairs")
    a.add_argument("manifest", help="pairs manifest (or a directory containing pairs.tsv)")
    a.add_argument("--checkpoint", required=True, help="pretrain checkpoint, or align checkpoint to resume")
    a.add_argument("--iters", type=int)

    r = sub.add_parser("reparam", parents=[common], help="merge CFI^T into the convolutions")
    r.add_argument("--checkpoint", required=True)

    for name, helptext in (("enhance", "enhance one frame"), ("eval", "score a manifest of pairs")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        if name == "enhance":
            e.add_argument("input", help="noisy .r4 frame")
            e.add_argument("--ratio", type=float, help="exposure ratio (default: from the file header)")
            e.add_argument("--preview", help="also write a gamma-mapped PNG preview")
        else:
            e.add_argument("manifest")
            e.add_argument("--no-cc", action="store_true", help="ablate the color corrector")
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--camera", help="CFI pathway for pretrain checkpoints")
        e.add_argument("--eta", type=float, help="sampling stochasticity (default: from the checkpoint)")
    return p


COMMANDS = {
    "gen-scenes": cmd_gen_scenes, "synth": cmd_synth, "pretrain": cmd_pretrain, "align": cmd_align,
    "reparam": cmd_reparam, "enhance": cmd_enhance, "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "gen-scenes" and (args.size < 4 or args.size % 4):
            raise UsageError(f"--size must be a positive multiple of 4, got {args.size}")
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"rawdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"rawdiff: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, rawproc.RawFormatError, noisespace.NoiseSpaceError,
            trainer.CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"rawdiff: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
