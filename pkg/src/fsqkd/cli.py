"""Command-line entry points.

Subcommands: simulate, alice, bob, linkbudget, kms-get, sync.

Exit codes:
    0  success
    1  session aborted or authentication failed (no key released)
    2  invalid arguments or configuration
    3  connection failure or timeout
    4  key starvation (kms-get)

Configuration files are INI style; keys mirror the long flag names
(dashes or underscores), grouped into the sections [source], [session],
[network] and [files]. Values given as flags override the file, which
overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import base64
import configparser
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

from . import linkmodel, simulator, sync
from .auth import AuthKeys
from .channel import ChannelError, SocketChannel
from .core import Party, TagFileError, read_stream, write_stream
from .kms import OK, STARVATION, KeyStore, KmsClient, KmsError, KmsServer
from .session import SessionConfig, format_stats_csv, run_session

EXIT_OK, EXIT_ABORT, EXIT_USAGE, EXIT_CONN, EXIT_STARVED = 0, 1, 2, 3, 4

SOURCE_FIELDS = [f.name for f in dataclasses.fields(simulator.SourceParams)]
SESSION_FIELDS = [f.name for f in dataclasses.fields(SessionConfig)]


class UsageError(Exception):
    pass


def _coerce(value, like):
    if isinstance(like, bool):
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(like, int) and not isinstance(like, bool):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def load_config(path) -> dict[str, dict[str, str]]:
    """Read an INI config into {section: {key: value}} with normalized keys."""
    if not path:
        return {}
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise UsageError(f"cannot read config file {path}")
    return {s: {k.replace("-", "_"): v for k, v in cp[s].items()} for s in cp.sections()}


def _merge(defaults, section: dict, flags: dict, fields: list[str]) -> dict:
    """flags > config section > defaults, for the named dataclass fields."""
    out = {}
    for name in fields:
        base = getattr(defaults, name)
        if flags.get(name) is not None:
            out[name] = flags[name]
        elif name in section:
            like = base if base is not None else ""
            out[name] = _coerce(section[name], like)
    return out


def source_params(args, conf: dict, prefix: str = "") -> simulator.SourceParams:
    flags = {k[len(prefix):]: v for k, v in vars(args).items() if k.startswith(prefix)}
    preset = flags.get("preset") or conf.get("source", {}).get("preset")
    if preset:
        if preset not in simulator.PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {sorted(simulator.PRESETS)}")
        base = simulator.PRESETS[preset]()
    else:
        base = simulator.SourceParams()
    vals = _merge(base, conf.get("source", {}), flags, SOURCE_FIELDS)
    try:
        return dataclasses.replace(base, **vals)
    except ValueError as exc:
        raise UsageError(f"simulator: {exc}") from None


def session_config(args, conf: dict) -> SessionConfig:
    vals = _merge(SessionConfig(), conf.get("session", {}), vars(args), SESSION_FIELDS)
    try:
        return SessionConfig(**vals)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"session: {exc}") from None


def _add_source_flags(p: argparse.ArgumentParser, prefix: str = ""):
    """Simulator flags; endpoints prefix them with ``sim-`` to avoid clashes."""
    g = p.add_argument_group("source parameters")
    flag = "--" + prefix.replace("_", "-")
    g.add_argument(flag + "preset", dest=prefix + "preset", choices=sorted(simulator.PRESETS),
                   default=None, help="parameter bundle to start from")
    for f in dataclasses.fields(simulator.SourceParams):
        g.add_argument(flag + f.name.replace("_", "-"), dest=prefix + f.name,
                       type=type(f.default), default=None)


def _add_session_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("session parameters")
    g.add_argument("--window", type=int, default=None, help="coincidence window, full width in ps")
    g.add_argument("--search-range", type=float, default=None, help="sync search range, s")
    g.add_argument("--max-drift", type=float, default=None)
    g.add_argument("--min-block", type=int, default=None)
    g.add_argument("--sample-fraction", type=float, default=None)
    g.add_argument("--qber-max", type=float, default=None)
    g.add_argument("--cascade-passes", type=int, default=None)
    g.add_argument("--n-mar", type=int, default=None)
    g.add_argument("--auth-bits", type=int, default=None)
    g.add_argument("--timeout", type=float, default=None)
    g.add_argument("--stats-bin", type=float, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--abort-after", default=None, help="test hook: abort after the named stage")


def _host_port(s: str) -> tuple[str, int]:
    host, _, port = s.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise UsageError(f"bad address {s!r}, expected HOST:PORT") from None


# --- subcommands -------------------------------------------------------------


def cmd_simulate(args) -> int:
    conf = load_config(args.config)
    p = source_params(args, conf)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    a, b, gt = simulator.generate_session(p, truth=args.truth)
    write_stream(a, out / "alice.ttag")
    write_stream(b, out / "bob.ttag")
    (out / "truth.json").write_text(json.dumps(gt.to_json(), indent=2))
    print(json.dumps({"alice": str(out / "alice.ttag"), "bob": str(out / "bob.ttag"),
                      "tags_a": len(a), "tags_b": len(b)}))
    return EXIT_OK


def _endpoint_tags(args, conf, role: Party):
    tags = args.tags or conf.get("files", {}).get("tags")
    if tags:
        try:
            return read_stream(tags, role)
        except (OSError, TagFileError) as exc:
            raise UsageError(f"cannot read tag file {tags}: {exc}") from None
    p = source_params(args, conf, prefix="sim_")
    a, b, _ = simulator.generate_session(p, truth=False)
    return a if role is Party.ALICE else b


def cmd_endpoint(args, role: Party) -> int:
    conf = load_config(args.config)
    cfg = session_config(args, conf)
    psk = args.psk or conf.get("files", {}).get("psk")
    if not psk:
        raise UsageError("a pre-shared key file (--psk) is required")
    try:
        keys = AuthKeys.from_file(psk)
    except OSError as exc:
        raise UsageError(f"cannot read pre-shared key file {psk}: {exc}") from None
    tags = _endpoint_tags(args, conf, role)
    net = conf.get("network", {})
    listen = args.listen or net.get("listen")
    connect = args.connect or net.get("connect")
    if bool(listen) == bool(connect):
        raise UsageError("give exactly one of --listen or --connect")
    try:
        if listen:
            host, port = _host_port(listen)
            channel = SocketChannel.accept(host, port, cfg.timeout,
                                           ready=lambda p: print(f"listening on {host}:{p}", flush=True))
        else:
            channel = SocketChannel.connect(*_host_port(connect), timeout=cfg.timeout)
    except ChannelError as exc:
        print(f"error: connection: {exc}", file=sys.stderr)
        return EXIT_CONN
    store = KeyStore.load(args.kms_snapshot) if args.kms_snapshot and Path(args.kms_snapshot).exists() \
        else KeyStore("alice", "bob")
    try:
        result = run_session(role, tags, cfg, channel, keys, store)
    finally:
        channel.close()
    summary = {k: v for k, v in result.metrics.items() if k != "bins"}
    summary.update(stage=result.state.stage.name.lower(), reason=result.reason,
                   key_id=result.key_id.hex() if result.key_id else None)
    if args.stats:
        stats = Path(args.stats)
        stats.write_text(format_stats_csv(result.stats))
        stats.with_suffix(".json").write_text(json.dumps(
            {"schema": "fsqkd-stats/1", "summary": summary, "bins": result.stats}, indent=2, default=float))
    if args.kms_snapshot:
        store.save(args.kms_snapshot)
    print(json.dumps(summary, default=float))
    if not result.ok:
        print(f"error: session aborted: {result.reason}", file=sys.stderr)
        return EXIT_CONN if "timeout" in result.reason or "closed" in result.reason else EXIT_ABORT
    if args.kms_serve:
        srv = KmsServer(store, *_host_port(args.kms_serve))
        print(f"kms on 127.0.0.1:{srv.port}", flush=True)
        try:
            srv.serve_forever()
        except KeyboardInterrupt:
            pass
    return EXIT_OK


def cmd_linkbudget(args) -> int:
    try:
        base = linkmodel.LinkParams(distance=1.0, cn2=args.cn2[0], wavelength=args.wavelength,
                                    waist=args.waist, rx_aperture_diam=args.aperture,
                                    waist_is_diameter=args.waist_diameter)
        rows = linkmodel.sweep_loss(base, args.distance, args.cn2)
    except ValueError as exc:
        raise UsageError(f"linkmodel: {exc}") from None
    out: dict = {"loss": [{"L_m": L, "cn2": c, "loss_db": d} for L, c, d in rows]}
    if args.skr_base is not None:
        loss = args.loss if args.loss is not None else rows[-1][2]
        try:
            out["skr_bps"] = linkmodel.extrapolate_skr(args.skr_base, loss)
        except ValueError as exc:
            raise UsageError(f"linkmodel: {exc}") from None
        out["extra_loss_db"] = loss
    if args.format == "json":
        print(json.dumps(out, indent=2))
        return EXIT_OK
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["L_m", "cn2", "loss_db"])
    for r in out["loss"]:
        w.writerow([f"{r['L_m']:g}", f"{r['cn2']:g}", f"{r['loss_db']:.4f}"])
    sys.stdout.write(buf.getvalue())
    if "skr_bps" in out:
        print(f"# skr_bps={out['skr_bps']:.1f} at extra_loss_db={out['extra_loss_db']:.3f}")
    return EXIT_OK


def cmd_kms_get(args) -> int:
    if args.snapshot:
        store = KeyStore.load(args.snapshot)
        src, dst = sorted(store.link) if not args.source else (args.source, args.destination)
        try:
            ksid = store.open_connect(src, dst)
            r = store.get_key(ksid, args.length, bytes.fromhex(args.key_id) if args.key_id else None)
            store.close(ksid)
        except (KmsError, ValueError) as exc:
            raise UsageError(f"kms: {exc}") from None
        if r.status != OK:
            print("error: key starvation", file=sys.stderr)
            return EXIT_STARVED
        store.save(args.snapshot)
        print(json.dumps({"key_id": r.key_id.hex(), "key_b64": base64.b64encode(r.key).decode()}))
        return EXIT_OK
    try:
        client = KmsClient(*_host_port(args.kms))
    except OSError as exc:
        print(f"error: connection: {exc}", file=sys.stderr)
        return EXIT_CONN
    try:
        opened = client.open_connect(args.source or "alice", args.destination or "bob")
        if opened["status"] != OK:
            raise UsageError(f"kms: {opened.get('error')}")
        r = client.get_key(opened["ksid"], args.length, args.key_id)
        client.close_session(opened["ksid"])
    finally:
        client.close()
    if r["status"] == STARVATION:
        print("error: key starvation", file=sys.stderr)
        return EXIT_STARVED
    if r["status"] != OK:
        raise UsageError(f"kms: {r.get('error')}")
    print(json.dumps({"key_id": r["key_id"], "key_b64": r["key_b64"]}))
    return EXIT_OK


def cmd_sync(args) -> int:
    try:
        a = read_stream(args.alice, Party.ALICE)
        b = read_stream(args.bob, Party.BOB)
    except (OSError, TagFileError) as exc:
        raise UsageError(f"cannot read tag file: {exc}") from None
    try:
        model = sync.synchronize(a, b, args.search_range, args.min_block, args.max_drift)
    except sync.NoSyncError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    out = model.to_json()
    coinc = sync.match_coincidences(a, b, model, args.window)
    out["coincidences"] = len(coinc)
    print(json.dumps(out, indent=2))
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fsqkd", description="Entanglement-based QKD post-processing")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate Alice/Bob tag files")
    p.add_argument("--config")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--truth", action="store_true", help="record per-tag origin labels")
    _add_source_flags(p)

    for role in ("alice", "bob"):
        p = sub.add_parser(role, help=f"run the {role} endpoint")
        p.add_argument("--config")
        p.add_argument("--listen", help="HOST:PORT to accept the peer on")
        p.add_argument("--connect", help="HOST:PORT of the listening peer")
        p.add_argument("--tags", help="TTAG1 file; without it the simulator provides live tags")
        p.add_argument("--psk", help="pre-shared key file")
        p.add_argument("--stats", help="stats CSV output (a .json twin is written alongside)")
        p.add_argument("--kms-snapshot", help="key store snapshot file to load and update")
        p.add_argument("--kms-serve", help="after the session, serve the key store on HOST:PORT")
        _add_session_flags(p)
        _add_source_flags(p, prefix="sim_")

    p = sub.add_parser("linkbudget", help="beam-spread loss table and key-rate scaling")
    p.add_argument("--distance", type=float, nargs="+", default=[1700.0, 10000.0])
    p.add_argument("--cn2", type=float, nargs="+", default=[1e-15])
    p.add_argument("--wavelength", type=float, default=810e-9)
    p.add_argument("--waist", type=float, default=0.04)
    p.add_argument("--aperture", type=float, default=0.2)
    p.add_argument("--waist-diameter", action="store_true", help="read --waist as a diameter")
    p.add_argument("--skr-base", type=float, help="measured key rate to extrapolate, bit/s")
    p.add_argument("--loss", type=float, help="extra loss for the extrapolation, dB")
    p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = sub.add_parser("kms-get", help="fetch a key from a key store")
    p.add_argument("--kms", default="127.0.0.1:7004", help="HOST:PORT of a serving endpoint")
    p.add_argument("--snapshot", help="operate on a snapshot file instead of a server")
    p.add_argument("--length", type=int, default=256, help="key length in bits")
    p.add_argument("--key-id", help="hex id of a key the peer already fetched")
    p.add_argument("--source")
    p.add_argument("--destination")

    p = sub.add_parser("sync", help="print the offset model of two tag files as JSON")
    p.add_argument("alice")
    p.add_argument("bob")
    p.add_argument("--search-range", type=float, default=sync.DEFAULT_SEARCH_RANGE)
    p.add_argument("--min-block", type=int, default=sync.DEFAULT_MIN_BLOCK)
    p.add_argument("--max-drift", type=float, default=sync.DEFAULT_MAX_DRIFT)
    p.add_argument("--window", type=int, default=sync.DEFAULT_WINDOW)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command in ("alice", "bob"):
            return cmd_endpoint(args, Party(args.command.capitalize()))
        if args.command == "linkbudget":
            return cmd_linkbudget(args)
        if args.command == "kms-get":
            return cmd_kms_get(args)
        return cmd_sync(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
