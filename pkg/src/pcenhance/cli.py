"""Command line interface: ``pcenhance <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, dump_config, load_config
from .distortion import DistortionProfile, bitrate_proxy, distort
from .metrics import RDCurve, bd_metrics, bd_quality, psnr, ycbcr_psnr
from .patches import (
    GroupedPatch,
    Patch,
    generate_patches,
    load_patch_archive,
    neighbor_patch_ids,
    save_patch_archive,
)
from .pointcloud_io import CHANNELS, ColorSpace, load_ply, rgb_to_ycbcr, save_ply, ycbcr_to_rgb
from .trainer import TrainConfig, build_dataset, enhance_cloud, patch_count, train

log = logging.getLogger("pcenhance")

RD_HEADER = "# pcenhance-rd v1"
BD_HEADER = "# pcenhance-bd v1"
RD_COLUMNS = ["sequence", "rate_point", "bitrate", "psnr_y", "psnr_cb", "psnr_cr", "psnr_ycbcr"]
COMMANDS = ("distort", "patchify", "train", "enhance", "eval", "bdrate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def sidecar_path(ply_path) -> Path:
    p = Path(ply_path)
    return p.with_name(p.name + ".json")


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed)


def _as_ycbcr(pc):
    return pc if pc.color_space is ColorSpace.YCBCR else rgb_to_ycbcr(pc)


def _fmt_db(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.6f}"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_distort(args):
    pc = _as_ycbcr(load_ply(args.input))
    profile = DistortionProfile(qp=args.qp, smoothing_k=args.smoothing_k, seed=args.seed or 0)
    out = distort(pc, profile)
    save_ply(out, args.output)
    record = {
        "source": str(args.input),
        "profile": profile.to_dict(),
        "bitrate_proxy": bitrate_proxy(out, profile),
        "n_points": len(out),
    }
    sidecar_path(args.output).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"{args.output}: qp {args.qp}, bitrate proxy {record['bitrate_proxy']:.4f} bpip")


def cmd_patchify(args):
    pc = _as_ycbcr(load_ply(args.input))
    m = args.m if args.m else patch_count(len(pc), args.n, args.ol)
    patches = generate_patches(pc, m, args.ol)
    ids = neighbor_patch_ids(patches, min(args.num_nei, m - 1))
    targets = None
    if args.original:
        orig = _as_ycbcr(load_ply(args.original))
        if not np.array_equal(orig.geometry, pc.geometry):
            raise ValueError("original and input clouds must share geometry and point order")
        targets = [orig.attributes[p.indices] for p in patches]
    save_patch_archive(args.output, patches, ids, len(pc), targets)
    print(f"{args.output}: {m} patches of {len(patches[0])} points")


def _train_config(args) -> tuple[TrainConfig, dict]:
    overrides = list(args.set or [])
    flag_map = {
        "epochs": "epochs", "batch_size": "batch_size", "lr_generator": "lr_generator",
        "lr_discriminator": "lr_discriminator", "n_critic": "n_critic", "k": "k", "n": "n",
        "ol": "ol", "num_nei": "num_nei", "max_steps": "max_steps", "channel": "channel",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"train.{key}={value}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _load_pairs(originals, distorted, cfg: TrainConfig):
    if len(originals) != len(distorted):
        raise UsageError("--original and --distorted must be given the same number of times")
    dataset = []
    for o, d in zip(originals, distorted):
        dataset += build_dataset(_as_ycbcr(load_ply(o)), _as_ycbcr(load_ply(d)), cfg.n, cfg.ol, cfg.num_nei)
    return dataset


def _load_archives(paths):
    dataset = []
    for path in paths:
        patches, ids, _, targets = load_patch_archive(path)
        if targets is None:
            raise ValueError(f"{path} has no original attributes; patchify it with --original")
        groups = [GroupedPatch(center=p, neighbors=[patches[j] for j in row]) for p, row in zip(patches, ids)]
        for g, t in zip(groups, targets):
            pts = np.concatenate([g.center.geometry, t], axis=1)
            dataset.append((g, Patch(points=pts, indices=g.center.indices, seed_index=g.center.seed_index)))
    return dataset


def cmd_train(args):
    cfg, data = _train_config(args)
    originals = (args.original or []) or data.get("original", [])
    distorted = (args.distorted or []) or data.get("distorted", [])
    archives = (args.archive or []) or data.get("archive", [])
    dataset = _load_pairs(originals, distorted, cfg) + _load_archives(archives)
    if not dataset:
        raise UsageError("no training data: give --original/--distorted pairs or --archive files")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config_{cfg.channel}.cfg").write_text(dump_config(cfg))
    result = train(dataset, cfg, out_dir=out)
    last = result.history[-1]
    print(f"{cfg.channel}: {result.steps} generator steps, val PSNR {_fmt_db(last['val_PSNR'])} dB -> {out}")


def cmd_enhance(args):
    cfg, _ = load_config(args.config, list(args.set or []))
    src = load_ply(args.input)
    channels = tuple(args.channels.split(",")) if args.channels else CHANNELS
    bad = [c for c in channels if c not in CHANNELS]
    if bad:
        raise UsageError(f"unknown channel(s) {', '.join(bad)}; choose from {', '.join(CHANNELS)}")
    out = enhance_cloud(_as_ycbcr(src), args.ckpt, cfg, channels)
    if src.color_space is ColorSpace.RGB:
        out = ycbcr_to_rgb(out)
    save_ply(out, args.output)
    side = sidecar_path(args.input)
    if side.exists():
        record = json.loads(side.read_text())
        record["enhanced_from"] = str(args.input)
        sidecar_path(args.output).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"{args.output}: enhanced {', '.join(channels)}")


def _bitrate_for(path, explicit):
    if explicit is not None:
        return explicit
    side = sidecar_path(path)
    if not side.exists():
        raise ValueError(f"no bitrate for {path}: pass --bitrate or keep the {side.name} sidecar")
    return float(json.loads(side.read_text())["bitrate_proxy"])


def rd_rows(sequence, original, clouds, bitrates=None, iwssim=None):
    orig = _as_ycbcr(original)
    rows = []
    for i, (path, pc) in enumerate(clouds):
        pc = _as_ycbcr(pc)
        if len(pc) != len(orig):
            raise ValueError(f"{path}: {len(pc)} points, original has {len(orig)}")
        ps = [psnr(pc.attributes[:, c], orig.attributes[:, c]) for c in range(3)]
        row = {
            "sequence": sequence,
            "rate_point": i,
            "bitrate": _bitrate_for(path, bitrates[i] if bitrates else None),
            "psnr_y": ps[0], "psnr_cb": ps[1], "psnr_cr": ps[2],
            "psnr_ycbcr": ycbcr_psnr(*ps),
        }
        if iwssim:
            row["iwssim"] = iwssim[i]
        rows.append(row)
    rows.sort(key=lambda r: r["bitrate"])
    for i, r in enumerate(rows):
        r["rate_point"] = i
    return rows


def write_rd_csv(path, rows):
    cols = RD_COLUMNS + (["iwssim"] if rows and "iwssim" in rows[0] else [])
    with open(path, "w", newline="") as fh:
        fh.write(RD_HEADER + "\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (str, int)) else ("inf" if math.isinf(r[c]) else repr(float(r[c])))
                        for c in cols])


def read_rd_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != RD_HEADER:
            raise ValueError(f"{path}: expected header line {RD_HEADER!r}, got {first!r}")
        reader = csv.DictReader(fh)
        missing = set(RD_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        rows = []
        for r in reader:
            row = {"sequence": r["sequence"], "rate_point": int(r["rate_point"])}
            for c in RD_COLUMNS[2:] + (["iwssim"] if "iwssim" in r and r["iwssim"] not in (None, "") else []):
                row[c] = float(r[c])
            rows.append(row)
    return rows


def cmd_eval(args):
    if args.bitrate and len(args.bitrate) != len(args.clouds):
        raise UsageError("--bitrate needs one value per cloud")
    if args.iwssim and len(args.iwssim) != len(args.clouds):
        raise UsageError("--iwssim needs one value per cloud")
    original = load_ply(args.original)
    clouds = [(p, load_ply(p)) for p in args.clouds]
    sequence = args.sequence or Path(args.original).stem
    rows = rd_rows(sequence, original, clouds, args.bitrate, args.iwssim)
    write_rd_csv(args.output, rows)
    for r in rows:
        print(f"{r['sequence']} R{r['rate_point']:02d} {r['bitrate']:.4f} bpip  "
              f"Y {_fmt_db(r['psnr_y'])}  Cb {_fmt_db(r['psnr_cb'])}  Cr {_fmt_db(r['psnr_cr'])}  "
              f"YCbCr {_fmt_db(r['psnr_ycbcr'])}")
    if args.gnuplot:
        gp = Path(args.gnuplot)
        gp.mkdir(parents=True, exist_ok=True)
        with open(gp / f"{sequence}.dat", "w") as fh:
            fh.write("# bitrate psnr_y psnr_cb psnr_cr psnr_ycbcr\n")
            for r in rows:
                fh.write(" ".join(str(r[c]) for c in RD_COLUMNS[2:]) + "\n")


def bd_table(anchor_rows, test_rows):
    """BD figures per sequence and channel; returns a list of result dicts."""
    def by_seq(rows):
        out = {}
        for r in rows:
            out.setdefault(r["sequence"], []).append(r)
        return {k: sorted(v, key=lambda r: r["bitrate"]) for k, v in out.items()}

    a, t = by_seq(anchor_rows), by_seq(test_rows)
    common = [s for s in a if s in t]
    if not common:
        raise ValueError("anchor and test share no sequence")
    results = []
    for seq in common:
        ra = [r["bitrate"] for r in a[seq]]
        rt = [r["bitrate"] for r in t[seq]]
        for col in ("psnr_y", "psnr_cb", "psnr_cr", "psnr_ycbcr"):
            res = bd_metrics(RDCurve.from_arrays(ra, [r[col] for r in a[seq]]),
                             RDCurve.from_arrays(rt, [r[col] for r in t[seq]]))
            results.append({"sequence": seq, "metric": col, "bd_rate_percent": res.bd_rate_percent,
                            "bd_psnr_db": res.bd_psnr_db})
        if all("iwssim" in r for r in a[seq] + t[seq]):
            gain = bd_quality(ra, [r["iwssim"] for r in a[seq]], rt, [r["iwssim"] for r in t[seq]])
            results.append({"sequence": seq, "metric": "iwssim", "bd_rate_percent": float("nan"),
                            "bd_psnr_db": gain})
    return results


def cmd_bdrate(args):
    results = bd_table(read_rd_csv(args.anchor), read_rd_csv(args.test))
    print(f"{'sequence':<20} {'metric':<11} {'BD-rate':>12} {'BD-quality':>12}")
    for r in results:
        rate = "n/a" if math.isnan(r["bd_rate_percent"]) else f"{r['bd_rate_percent']:.4f}%"
        print(f"{r['sequence']:<20} {r['metric']:<11} {rate:>12} {r['bd_psnr_db']:>12.4f}")
    y = [r for r in results if r["metric"] == "psnr_y"]
    mean_rate = sum(r["bd_rate_percent"] for r in y) / len(y)
    mean_psnr = sum(r["bd_psnr_db"] for r in y) / len(y)
    print(f"BD-rate {mean_rate:.4f}% (Y average), BD-PSNR {mean_psnr:.4f} dB")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write(BD_HEADER + "\n")
            w = csv.writer(fh)
            w.writerow(["sequence", "metric", "bd_rate_percent", "bd_psnr_db"])
            for r in results:
                w.writerow([r["sequence"], r["metric"], repr(r["bd_rate_percent"]), repr(r["bd_psnr_db"])])


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pcenhance", description="Point cloud attribute enhancement toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, help="seed for every random choice (default: config value, else 0)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    sp = sub.add_parser("distort", help="simulate attribute coding distortion at one QP")
    sp.add_argument("input", help="input PLY")
    sp.add_argument("-o", "--output", required=True, help="output PLY; a <output>.json sidecar records the profile")
    sp.add_argument("--qp", type=int, required=True, help="quantization parameter (larger is coarser)")
    sp.add_argument("--smoothing-k", type=int, default=8, help="neighbors in the low-pass blend, 0 disables (default 8)")
    common(sp)
    sp.set_defaults(func=cmd_distort)

    sp = sub.add_parser("patchify", help="cut a cloud into grouped patches and store them as an archive")
    sp.add_argument("input", help="input (distorted) PLY")
    sp.add_argument("-o", "--output", required=True, help="output patch archive")
    sp.add_argument("--original", help="original PLY; its attributes are stored as training targets")
    sp.add_argument("--n", type=int, default=2048, help="target points per patch (default 2048)")
    sp.add_argument("--m", type=int, help="number of patches; overrides --n")
    sp.add_argument("--ol", type=float, default=2.0, help="overlap ratio (default 2)")
    sp.add_argument("--num-nei", type=int, default=6, help="neighbor patches per group (default 6)")
    common(sp)
    sp.set_defaults(func=cmd_patchify)

    sp = sub.add_parser("train", help="train one channel's generator and critic")
    sp.add_argument("--config", help="run configuration file")
    sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    sp.add_argument("--original", action="append", help="original PLY (repeatable, paired with --distorted)")
    sp.add_argument("--distorted", action="append", help="distorted PLY (repeatable)")
    sp.add_argument("--archive", action="append", help="patch archive with targets (repeatable)")
    sp.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    sp.add_argument("--channel", choices=CHANNELS, help="channel to train")
    sp.add_argument("--epochs", type=int, help="training epochs")
    sp.add_argument("--batch-size", type=int, help="patches per batch")
    sp.add_argument("--lr-generator", type=float, help="generator learning rate")
    sp.add_argument("--lr-discriminator", type=float, help="critic learning rate")
    sp.add_argument("--n-critic", type=int, help="critic updates per generator update")
    sp.add_argument("--k", type=int, help="graph neighbors")
    sp.add_argument("--n", type=int, help="points per patch")
    sp.add_argument("--ol", type=float, help="overlap ratio")
    sp.add_argument("--num-nei", type=int, help="neighbor patches per group")
    sp.add_argument("--max-steps", type=int, help="stop after this many generator steps")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("enhance", help="enhance a decoded cloud with trained generators")
    sp.add_argument("input", help="decoded PLY")
    sp.add_argument("--ckpt", required=True, help="checkpoint directory ({channel}/generator.ckpt)")
    sp.add_argument("-o", "--output", required=True, help="output PLY")
    sp.add_argument("--config", help="run configuration (patch size, overlap, k)")
    sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    sp.add_argument("--channels", help="comma separated channels to enhance (default Y,Cb,Cr)")
    common(sp)
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("eval", help="per-channel PSNR of decoded/enhanced clouds as an RD CSV")
    sp.add_argument("original", help="reference PLY")
    sp.add_argument("clouds", nargs="+", help="clouds to score, one per rate point")
    sp.add_argument("-o", "--output", required=True, help="output RD CSV")
    sp.add_argument("--sequence", help="sequence name (default: original file stem)")
    sp.add_argument("--bitrate", type=float, nargs="+", help="bitrates in bpip; default reads <cloud>.json sidecars")
    sp.add_argument("--iwssim", type=float, nargs="+", help="externally computed perceptual scores, one per cloud")
    sp.add_argument("--gnuplot", help="directory for gnuplot-ready .dat RD files")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bdrate", help="Bjontegaard deltas between two RD CSVs")
    sp.add_argument("anchor", help="anchor RD CSV")
    sp.add_argument("test", help="test RD CSV")
    sp.add_argument("--csv", help="also write the BD table as CSV")
    common(sp)
    sp.set_defaults(func=cmd_bdrate)
    return p


def _suggest(argv) -> str | None:
    """Usage message for an unknown command, or None if argv looks fine."""
    first = next((a for a in argv if not a.startswith("-")), None)
    if first is None or first in COMMANDS:
        return None
    close = difflib.get_close_matches(first, COMMANDS, n=3)
    hint = f"; did you mean {' or '.join(close)}?" if close else ""
    return f"pcenhance: unknown command {first!r}{hint} (choose from {', '.join(COMMANDS)})"


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    message = _suggest(argv)
    if message:
        print(message, file=sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _seed_everything(args.seed or 0)
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"pcenhance {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        log.debug("command failed", exc_info=True)
        print(f"pcenhance {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
