"""``mflpr`` command line.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 internal check failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import sys
import time
import warnings
from pathlib import Path

from .config import Config
from .correlation import fft_workers
from .descriptor import format_grid
from .errors import ConfigError, DataError, MalformedFileError, MflprError, ParameterError
from .geometry import load_pointcloud

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
SCAN_SUFFIXES = (".bin", ".txt")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(args) -> Config:
    """Defaults, then ``--preset``, then ``--config``, then each ``--set key=value``."""
    cfg = Config.preset(args.preset) if args.preset else Config()
    if args.config:
        cfg = Config.from_file(args.config, base=cfg)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        overrides[key] = value
    return cfg.with_overrides(overrides) if overrides else cfg


def find_scan(scan_dir: Path, scan_id: int) -> Path | None:
    for stem in (f"{scan_id:06d}", str(scan_id)):
        for suffix in SCAN_SUFFIXES:
            path = scan_dir / f"{stem}{suffix}"
            if path.is_file():
                return path
    return None


def list_scans(scan_dir: Path) -> dict[int, Path]:
    """Scan files keyed by the integer id in their file name."""
    if not scan_dir.is_dir():
        raise DataError(f"{scan_dir}: not a directory")
    out = {}
    for path in sorted(scan_dir.iterdir()):
        if path.suffix not in SCAN_SUFFIXES:
            continue
        try:
            sid = int(path.stem)
        except ValueError:
            continue
        if sid in out:
            raise DataError(f"{scan_dir}: two files for scan id {sid}")
        out[sid] = path
    return out


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_synth(cfg: Config, out_dir: str) -> int:
    from .synth import EmptyWorldWarning, generate_benchmark, params_from_config

    layout, sensor, world = params_from_config(cfg)
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyWorldWarning)
        bench = generate_benchmark(cfg.seed, out_dir, layout, sensor, world, cfg.scan_format)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"wrote {len(bench.ref_poses)} reference and {len(bench.query_poses)} query scans "
          f"({len(bench.world)} landmarks) to {out_dir} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_build_index(cfg: Config, scan_dir: str, poses_csv: str, out_dir: str) -> int:
    from .search import build_reference_index, read_poses_csv, save_index

    t0 = time.perf_counter()
    sdir = Path(scan_dir)
    if not sdir.is_dir():
        raise DataError(f"{sdir}: not a directory")
    rows = read_poses_csv(poses_csv)
    if not rows:
        raise DataError(f"{poses_csv}: no poses")
    scans = []
    for rid, pose in rows:
        path = find_scan(sdir, rid)
        if path is None:
            raise DataError(f"no scan file for reference id {rid} in {sdir}")
        scans.append((rid, lambda p=path: load_pointcloud(p), pose))
    index = build_reference_index(scans, cfg)
    save_index(index, out_dir)
    print(f"indexed {len(index)} of {len(rows)} scans (mosaic {index.tiles[0]}x{index.tiles[1]} tiles) "
          f"in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def _search_config(index_cfg: Config, cfg: Config) -> Config:
    return index_cfg.replace(k=cfg.k, n=cfg.n)


def cmd_localize(cfg: Config, index_dir: str, scan_path: str, dump_surface: str | None = None) -> int:
    from .search import load_index, localize, match_surface

    index = load_index(index_dir)
    cloud = load_pointcloud(scan_path)
    est = localize(index, cloud, _search_config(index.config, cfg))
    if est.low_confidence:
        print("warning: query descriptor has no occupied cells; estimate is low confidence", file=sys.stderr)
    p = est.pose
    print(f"{est.reference_id} {p.x:.6f} {p.y:.6f} {p.yaw:.6f} {est.score:.6f}")
    if dump_surface:
        grid = match_surface(index, cloud, est)
        Path(dump_surface).write_text(format_grid(grid, index.high_cell_size))
    return EXIT_OK


def cmd_evaluate(cfg: Config, index_dir: str, query_dir: str, gt_csv: str, out_csv: str,
                 summary_path: str | None = None) -> int:
    from .metrics import EvalRecord, aggregate, format_report_rows
    from .search import load_index, localize, read_poses_csv

    index = load_index(index_dir)
    search_cfg = _search_config(index.config, cfg)
    gt = dict(read_poses_csv(gt_csv))
    queries = list_scans(Path(query_dir))
    if not queries:
        raise DataError(f"{query_dir}: no query scans")
    missing = [q for q in queries if q not in gt]
    if missing:
        raise DataError(f"no ground-truth row for query {missing[0]}"
                        + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))

    def run(qid: int) -> EvalRecord:
        est = localize(index, load_pointcloud(queries[qid]), search_cfg)
        return EvalRecord.build(qid, est, gt[qid], cfg.recall_threshold, uncorrected=cfg.score_uncorrected)

    t0 = time.perf_counter()
    order = sorted(queries)
    with concurrent.futures.ThreadPoolExecutor(max_workers=fft_workers()) as pool:
        records = list(pool.map(run, order))
    Path(out_csv).write_text(format_report_rows(records))
    report = aggregate(records, cfg.recall_threshold, cfg.sr_rte, cfg.sr_rre)
    text = report.summary()
    if summary_path:
        Path(summary_path).write_text(text)
    sys.stdout.write(text)
    print(f"evaluated {len(records)} queries in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_selfcheck(inject_fault: bool = False) -> int:
    from .correlation import correlate_fft
    from .selfcheck import faulty_correlate, run_selfcheck

    t0 = time.perf_counter()
    results = run_selfcheck(faulty_correlate if inject_fault else correlate_fft)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if not failed else EXIT_CHECK


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--preset", help="built-in preset (urban, natural)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = _Parser(prog="mflpr", description="Matched-filter LiDAR place recognition on BEV descriptors.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic benchmark")
    s.add_argument("out_dir")

    s = sub.add_parser("build-index", parents=[common], help="build a reference index")
    s.add_argument("scan_dir")
    s.add_argument("poses_csv")
    s.add_argument("out_dir")

    s = sub.add_parser("localize", parents=[common], help="localize one scan against an index")
    s.add_argument("index_dir")
    s.add_argument("scan")
    s.add_argument("--dump-surface", metavar="PATH", help="write the winning high-res correlation surface")

    s = sub.add_parser("evaluate", parents=[common], help="localize a query set and score it")
    s.add_argument("index_dir")
    s.add_argument("query_dir")
    s.add_argument("gt_csv")
    s.add_argument("out_csv")
    s.add_argument("--summary", metavar="PATH", help="also write the summary block to PATH")

    s = sub.add_parser("selfcheck", parents=[common], help="run the built-in consistency checks")
    s.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "selfcheck":
            return cmd_selfcheck(args.inject_fault)
        cfg = load_config(args)
        if args.command == "synth":
            return cmd_synth(cfg, args.out_dir)
        if args.command == "build-index":
            return cmd_build_index(cfg, args.scan_dir, args.poses_csv, args.out_dir)
        if args.command == "localize":
            return cmd_localize(cfg, args.index_dir, args.scan, args.dump_surface)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.index_dir, args.query_dir, args.gt_csv, args.out_csv, args.summary)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MalformedFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MflprError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    parser.error(f"unknown command {args.command!r}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
