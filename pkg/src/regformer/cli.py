"""Command-line surface: train, infer, eval, mask-dump, synth-data.

Also owns the two on-disk formats:

* Run configs are flat ``key = value`` text (``#`` comments, no nesting);
  every key has a default, unknown keys are rejected.  Serialization is
  canonical (fixed key order, shortest round-trip floats), so writing a
  parsed config reproduces it byte for byte.

* Checkpoints are little-endian binary: magic ``RGFM``, format version,
  the canonical config text, the step counter, then the parameters in
  store order as (path, shape, float32 payload).  Training checkpoints
  append an optimizer block holding the Adam moments and a float64 master
  copy of every parameter, which is what makes resumed runs bitwise
  identical to uninterrupted ones.
"""

from __future__ import annotations

import argparse
import struct
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as dat
from . import metrics as met
from .model import ModelConfig, Regformer, init_params
from .nn import AdamW, ParamStore, cosine_lr
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, absolute, mean_all, sub

__all__ = [
    "RunConfig",
    "ConfigError",
    "CheckpointError",
    "DataError",
    "load_run_config",
    "run_config_to_text",
    "save_checkpoint",
    "load_checkpoint",
    "restore_store",
    "main",
]


class ConfigError(Exception):
    """Bad config file or config/checkpoint mismatch."""


class CheckpointError(Exception):
    """Corrupt or incompatible checkpoint."""


class DataError(Exception):
    """Dataset-level failure (empty manifest, missing files, bad sizes)."""


@dataclass
class RunConfig:
    """Everything a training run needs; model fields mirror ModelConfig."""

    base_channels: int = 48
    blocks: tuple[int, ...] = (4, 4, 4, 4)
    heads: tuple[int, ...] = (6, 6, 6, 6)
    mgfb_n: int = 2
    mgfb_kernels: tuple[int, ...] = (3, 5)
    mgfb_expansion: int = 2
    mask_lambda: float = 0.0
    refinement_blocks: int = 1
    rtc_per_decoder_level: int = 1
    use_fg_mask: bool = True
    use_bg_mask: bool = True
    use_mgfb: bool = True
    activation: str = "gelu"
    seed: int = 0
    total_steps: int = 1000
    batch_size: int = 1
    patch_size: int = 128
    lr0: float = 3e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    train_manifest: str = ""
    out_dir: str = "runs/default"
    checkpoint_interval: int = 500

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            base_channels=self.base_channels,
            blocks=tuple(self.blocks),
            heads=tuple(self.heads),
            mgfb_n=self.mgfb_n,
            mgfb_kernels=tuple(self.mgfb_kernels),
            mgfb_expansion=self.mgfb_expansion,
            mask_lambda=self.mask_lambda,
            refinement_blocks=self.refinement_blocks,
            rtc_per_decoder_level=self.rtc_per_decoder_level,
            use_fg_mask=self.use_fg_mask,
            use_bg_mask=self.use_bg_mask,
            use_mgfb=self.use_mgfb,
            activation=self.activation,
        )

    def validate(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patch_size % 8:
            raise ConfigError("patch_size must be divisible by 8")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        try:
            self.model_config().validate()
        except ShapeError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _parse_bool(s: str) -> bool:
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_value(name: str, kind, raw: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            return _parse_bool(raw)
        if kind is str:
            return raw
        # remaining: tuple of ints, comma separated
        return tuple(int(p) for p in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    defaults = RunConfig()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, type(getattr(defaults, key)), raw)
    return RunConfig(**values)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    return parse_config_text(path.read_text())


def run_config_to_text(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_diff_keys(a: RunConfig, b: RunConfig) -> list[str]:
    return [f.name for f in fields(RunConfig) if getattr(a, f.name) != getattr(b, f.name)]


# -- checkpoint format -------------------------------------------------------

_MAGIC = b"RGFM"
_VERSION = 1


def save_checkpoint(path, cfg: RunConfig, step: int, store: ParamStore, optimizer: AdamW | None = None):
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<I", _VERSION)
    text = run_config_to_text(cfg).encode("utf-8")
    buf += struct.pack("<I", len(text))
    buf += text
    buf += struct.pack("<Q", step)
    items = list(store.items())
    buf += struct.pack("<I", len(items))
    for name, tensor in items:
        encoded = name.encode("utf-8")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += struct.pack("<B", tensor.data.ndim)
        for extent in tensor.data.shape:
            buf += struct.pack("<I", extent)
        buf += tensor.data.astype("<f4").tobytes()
    if optimizer is None:
        buf += struct.pack("<B", 0)
    else:
        buf += struct.pack("<B", 1)
        t, ms, vs = optimizer.state_arrays()
        buf += struct.pack("<Q", t)
        for (name, tensor), m, v in zip(items, ms, vs):
            buf += m.astype("<f8").tobytes()
            buf += v.astype("<f8").tobytes()
            buf += tensor.data.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, blob: bytes, label: str):
        self.blob = blob
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.label}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path):
    """Returns (cfg, step, records, opt_state).

    ``records`` is an ordered list of (path, float64 array) widened from the
    stored float32 payloads; ``opt_state`` is None or a dict with keys
    ``t``, ``m``, ``v``, ``master`` (all float64, parameter order).
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != _MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint)")
    version = r.unpack("<I")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    text = r.take(r.unpack("<I")).decode("utf-8")
    try:
        cfg = parse_config_text(text)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: embedded config invalid: {exc}") from exc
    step = r.unpack("<Q")
    count = r.unpack("<I")
    records = []
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode("utf-8")
        ndim = r.unpack("<B")
        shape = tuple(r.unpack("<I") for _ in range(ndim))
        n = 1
        for s in shape:
            n *= s
        payload = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64)
        records.append((name, payload.reshape(shape)))
    opt_state = None
    if r.unpack("<B"):
        t = r.unpack("<Q")
        ms, vs, masters = [], [], []
        for name, arr in records:
            n = arr.size
            ms.append(np.frombuffer(r.take(8 * n), dtype="<f8").reshape(arr.shape).copy())
            vs.append(np.frombuffer(r.take(8 * n), dtype="<f8").reshape(arr.shape).copy())
            masters.append(np.frombuffer(r.take(8 * n), dtype="<f8").reshape(arr.shape).copy())
        opt_state = {"t": t, "m": ms, "v": vs, "master": masters}
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return cfg, step, records, opt_state


def restore_store(cfg: RunConfig, records, masters=None) -> ParamStore:
    """Build a ParamStore from checkpoint records, validating every path
    and shape against what init_params would create for this config."""
    expected = list(Regformer(cfg.model_config()).param_specs())
    if len(expected) != len(records):
        raise CheckpointError(
            f"parameter count mismatch: checkpoint has {len(records)}, "
            f"config implies {len(expected)}"
        )
    store = ParamStore()
    for (exp_path, exp_shape, _), (name, arr), idx in zip(
        expected, records, range(len(records))
    ):
        if name != exp_path:
            raise CheckpointError(
                f"parameter {idx} is {name!r}, expected {exp_path!r}"
            )
        if tuple(arr.shape) != tuple(exp_shape):
            raise CheckpointError(
                f"{name}: shape {tuple(arr.shape)} does not match {tuple(exp_shape)}"
            )
        payload = masters[idx] if masters is not None else arr
        store.add(name, Tensor(np.array(payload, dtype=np.float64), requires_grad=True))
    return store


# -- commands -----------------------------------------------------------------


def _load_pairs(manifest_path) -> list[tuple[dat.Image, dat.Image]]:
    try:
        entries = dat.load_manifest(manifest_path)
    except dat.ImageError as exc:
        raise DataError(str(exc)) from exc
    if not entries:
        raise DataError(f"{manifest_path}: manifest lists no pairs")
    missing = [str(p) for pair in entries for p in pair if not Path(p).exists()]
    if missing:
        raise DataError("missing files: " + ", ".join(missing))
    return [(dat.load_image(c), dat.load_image(r)) for c, r in entries]


def _patch_seed(run_seed: int, sample_index: int) -> int:
    return (run_seed << 40) + sample_index


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    if not cfg.train_manifest:
        raise ConfigError("train_manifest is not set")
    manifest = Path(cfg.train_manifest)
    if not manifest.is_absolute():
        manifest = Path(args.config).parent / manifest
    pairs = _load_pairs(manifest)
    for clean, rainy in pairs:
        if min(clean.height, clean.width) < cfg.patch_size:
            raise DataError(
                f"patch_size {cfg.patch_size} exceeds an image "
                f"({clean.height}x{clean.width})"
            )

    net = Regformer(cfg.model_config())
    if args.resume:
        ck_cfg, start_step, records, opt_state = load_checkpoint(args.resume)
        # out_dir is where this invocation writes, not part of run identity
        diff = [k for k in config_diff_keys(ck_cfg, cfg) if k != "out_dir"]
        if diff:
            raise ConfigError(
                "checkpoint config differs from --config for keys: " + ", ".join(diff)
            )
        if opt_state is None:
            raise CheckpointError("checkpoint has no optimizer state; cannot resume")
        store = restore_store(cfg, records, opt_state["master"])
    else:
        start_step = 0
        store = init_params(cfg.model_config(), cfg.seed)

    optimizer = AdamW(
        store.tensors(),
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    if args.resume:
        optimizer.load_state(opt_state["t"], opt_state["m"], opt_state["v"])

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_lines = ["step,lr,loss"]

    for step in range(start_step, cfg.total_steps):
        lr = cosine_lr(step, cfg.total_steps, cfg.lr0, cfg.lr_min)
        store.zero_grads()
        try:
            with Tape() as tape:
                loss = None
                for j in range(cfg.batch_size):
                    k = step * cfg.batch_size + j
                    pair = pairs[k % len(pairs)]
                    clean, rainy = dat.sample_patch(
                        pair, cfg.patch_size, _patch_seed(cfg.seed, k)
                    )
                    out = net.forward(store, dat.to_unit(rainy))
                    term = mean_all(absolute(sub(out, Tensor(dat.to_unit(clean)))))
                    loss = term if loss is None else loss + term
                if cfg.batch_size > 1:
                    loss = loss * (1.0 / cfg.batch_size)
                loss_value = loss.item()
                tape.backward(loss)
        except NonFiniteError as exc:
            (out_dir / "train_log.csv").write_text("\n".join(log_lines) + "\n")
            raise DataError(f"non-finite loss at step {step}: {exc}") from exc
        optimizer.step(lr)
        log_lines.append(f"{step},{lr!r},{loss_value!r}")
        done = step + 1
        if (cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0) or (
            done == cfg.total_steps
        ):
            save_checkpoint(
                out_dir / f"ckpt_{done:06d}.rgfm", cfg, done, store, optimizer
            )
    (out_dir / "train_log.csv").write_text("\n".join(log_lines) + "\n")
    return 0


def _store_for_inference(args) -> tuple[RunConfig, ParamStore, Regformer]:
    cfg, _, records, _ = load_checkpoint(args.ckpt)
    if args.config:
        given = load_run_config(args.config)
        diff = config_diff_keys(cfg, given)
        if diff:
            raise ConfigError(
                "checkpoint config differs from --config for keys: " + ", ".join(diff)
            )
    store = restore_store(cfg, records)
    return cfg, store, Regformer(cfg.model_config())


def _infer_image(net: Regformer, store: ParamStore, img: dat.Image) -> dat.Image:
    out = net.forward(store, dat.to_unit(img))
    return dat.from_unit(out.data)


def cmd_infer(args) -> int:
    _, store, net = _store_for_inference(args)
    img = dat.load_image(args.input)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dat.save_image(_infer_image(net, store, img), out_path)
    return 0


def cmd_eval(args) -> int:
    _, store, net = _store_for_inference(args)
    try:
        entries = dat.load_manifest(args.manifest)
    except dat.ImageError as exc:
        raise DataError(str(exc)) from exc
    if not entries:
        raise DataError(f"{args.manifest}: manifest lists no pairs")
    missing = [str(p) for pair in entries for p in pair if not Path(p).exists()]
    if missing:
        raise DataError("missing files: " + ", ".join(missing))
    report = met.MetricReport()
    for clean_path, rainy_path in entries:
        clean = dat.load_image(clean_path)
        rainy = dat.load_image(rainy_path)
        restored = _infer_image(net, store, rainy)
        p, s = met.evaluate_pair(clean, restored)
        report.add(Path(rainy_path).name, p, s)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    met.write_report_csv(report, args.out)
    return 0


def cmd_mask_dump(args) -> int:
    _, store, net = _store_for_inference(args)
    img = dat.load_image(args.input)
    trace: list = []
    net.forward(store, dat.to_unit(img), trace=trace)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    gain_lines = []
    for entry in trace:
        tag = entry["prefix"].replace("decoder/", "").replace("/", "_")
        for key in ("rain", "unaffected"):
            mask = entry[key]
            binary = mask.binary.data[0]
            pix = (binary * 255.0).astype(np.uint8)
            gray = dat.Image(np.repeat(pix[:, :, None], 3, axis=2))
            dat.save_image(gray, out_dir / f"{tag}_{key}.png")
            gain_lines.append(f"{tag}/{key}\t{float(np.mean(mask.gain.data))!r}")
    (out_dir / "gains.txt").write_text("\n".join(gain_lines) + "\n")
    return 0


def cmd_synth_data(args) -> int:
    clean_dir = Path(args.clean_dir)
    if not clean_dir.is_dir():
        raise DataError(f"{clean_dir}: not a directory")
    sources = sorted(
        p for p in clean_dir.iterdir() if p.suffix.lower() in (".png", ".ppm")
    )
    if not sources:
        raise DataError(f"{clean_dir}: no .png or .ppm images found")
    params = dat.RainParams(
        streak_count=args.streaks,
        length=(args.length_min, args.length_max),
        angle=(args.angle_min, args.angle_max),
        width=args.width,
        intensity=(args.intensity_min, args.intensity_max),
        blur_sigma=args.blur_sigma,
    )
    out_dir = Path(args.out)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "rainy").mkdir(parents=True, exist_ok=True)
    manifest_pairs = []
    for index, src in enumerate(sources):
        clean = dat.load_image(src)
        rainy = dat.synth_rain(clean, params, args.seed + index)
        name = src.stem + ".png"
        dat.save_image(clean, out_dir / "clean" / name)
        dat.save_image(rainy, out_dir / "rainy" / name)
        manifest_pairs.append((f"clean/{name}", f"rainy/{name}"))
    dat.write_manifest(out_dir / "manifest.txt", manifest_pairs)
    return 0


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override config out_dir")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="derain one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="optional config to validate against")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a paired manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask-dump", help="write per-cascade region masks as PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_mask_dump)

    p = sub.add_parser("synth-data", help="generate rainy counterparts + manifest")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--streaks", type=int, default=12)
    p.add_argument("--length-min", type=float, default=8.0)
    p.add_argument("--length-max", type=float, default=16.0)
    p.add_argument("--angle-min", type=float, default=-15.0)
    p.add_argument("--angle-max", type=float, default=15.0)
    p.add_argument("--width", type=int, default=1)
    p.add_argument("--intensity-min", type=float, default=0.3)
    p.add_argument("--intensity-max", type=float, default=0.8)
    p.add_argument("--blur-sigma", type=float, default=0.5)
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    # Tiny per-image GEMMs lose to BLAS thread sync; one thread is both
    # faster at this scale and immune to thread-count-dependent summation.
    threadpool_limits(1, "blas")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (
        ConfigError,
        CheckpointError,
        DataError,
        dat.ImageError,
        ShapeError,
        NonFiniteError,
    ) as exc:
        print(f"regformer: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
