"""Command line entry points: ``carls bank|maker|trainer|scenario|data ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from .bank import NEVER, KnowledgeBank, NamespaceConfig
from .core import CarlsError, ConfigError

log = logging.getLogger("carls")

VARIANT_SCENARIO = {"graph_reg": "ssl_graph_reg", "encoder_gnn": "encoder_gnn", "two_tower": "two_tower"}


def parse_namespace(text: str) -> NamespaceConfig:
    """``name:kind[:dim[:expiry_ticks]]``, e.g. ``node_emb:embeddings:8`` or ``graph:features``."""
    parts = text.split(":")
    if len(parts) < 2 or len(parts) > 4:
        raise argparse.ArgumentTypeError(f"bad namespace spec {text!r}")
    try:
        dim = int(parts[2]) if len(parts) > 2 else 0
        expiry = int(parts[3]) if len(parts) > 3 else NEVER
        return NamespaceConfig(parts[0], parts[1], dim, flush_expiry_ticks=expiry)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad namespace spec {text!r}: {exc}") from None


def _write_atomically(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _overrides(pairs):
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        try:
            out[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            out[key.replace("-", "_")] = value
    return out


def _scenario(args):
    from .harness import Scenario

    if getattr(args, "config", None):
        scn = Scenario.load(args.config)
    else:
        scn = Scenario.preset(args.name)
    changes = _overrides(args.set)
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "staleness", None) is not None:
        changes["staleness"] = args.staleness
    return scn.replace(**changes) if changes else scn


# --------------------------------------------------------------------------
# bank


def cmd_bank_serve(args) -> int:
    from .rpc import serve

    if args.load:
        bank = KnowledgeBank.load(args.load)
    else:
        if not args.namespace:
            raise ConfigError("bank serve needs at least one --namespace (or --load)")
        cfgs = [c if args.seed is None else NamespaceConfig(**{**c.__dict__, "seed": args.seed}) for c in args.namespace]
        bank = KnowledgeBank(cfgs, args.shards)

    def ready(endpoint: str) -> None:
        log.info("bank listening on %s", endpoint)
        if args.ready_file:
            _write_atomically(Path(args.ready_file), endpoint + "\n")
        print(endpoint, flush=True)

    try:
        serve(bank, args.endpoint, ready=ready, workers=args.workers, expiry_ms=args.expiry_ms)
    finally:
        if args.save:
            bank.save(args.save)
            log.info("bank snapshot written to %s", args.save)
    return 0


# --------------------------------------------------------------------------
# maker


def cmd_maker_run(args) -> int:
    from .maker import Maker, MakerConfig, read_items
    from .rpc import RemoteBank

    cfg = MakerConfig(
        Path(args.checkpoint_dir),
        task=args.task,
        poll_interval=args.poll_ms / 1000.0,
        batch_size=args.batch_size,
        tau=args.tau,
        k=args.k,
        sigma_min=args.sigma_min,
        metric=args.metric,
        num_classes=args.num_classes,
        encoder=args.encoder,
        namespace=args.namespace,
        seed=args.seed or 0,
        min_step=args.min_step,
        max_passes=args.max_passes,
    )
    items = read_items(args.input)
    bank = RemoteBank.connect(args.bank, timeout=args.timeout)
    shutdown = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: shutdown.set())
    maker = Maker(cfg, bank, items)
    try:
        state = maker.run(shutdown)
    finally:
        bank.close()
    log.info("maker stopped: %s", state)
    return 0


# --------------------------------------------------------------------------
# trainer


def cmd_trainer_run(args) -> int:
    from .harness import Scenario, SyntheticDataset, run_trainer_process

    scn = Scenario.load(args.scenario) if args.scenario else Scenario.preset(VARIANT_SCENARIO[args.variant or "graph_reg"])
    changes = {}
    for flag, field in (("lr", "lr"), ("lam", "lam"), ("tau_c", "temperature"), ("rho", "fresh_fraction"), ("steps", "steps"),
                        ("seed", "seed"), ("ckpt_every", "ckpt_every"), ("hidden_dim", "hidden_dim"),
                        ("batch_size", "batch_size"), ("staleness", "staleness"), ("negatives", "num_negatives")):
        value = getattr(args, flag)
        if value is not None:
            changes[field] = value
    if args.variant and VARIANT_SCENARIO[args.variant] != scn.name and scn.variant != args.variant:
        raise ConfigError(f"--variant {args.variant} conflicts with scenario {scn.name}")
    scn = scn.replace(**changes)
    ds = SyntheticDataset.load(args.data)
    bank = None
    if args.bank:
        from .rpc import RemoteBank

        bank = RemoteBank.connect(args.bank, timeout=args.timeout)
    target = args.metrics if args.metrics and args.metrics != "-" else sys.stdout
    try:
        params = run_trainer_process(scn, ds, bank, args.ckpt_dir, target, barrier=not args.no_barrier)
    finally:
        if bank is not None:
            bank.close()
    log.info("trainer finished at step %d", params.step)
    return 0


# --------------------------------------------------------------------------
# scenario / data


def cmd_scenario_run(args) -> int:
    from .harness import run_scenario

    scn = _scenario(args)
    summary = run_scenario(scn, args.out, args.mode)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_scenario_compare(args) -> int:
    from .harness import compare_runs

    cmp = compare_runs(args.a, args.b, args.tol)
    print(cmp.report())
    if args.report:
        data = dict(cmp.__dict__, passed=cmp.passed)
        Path(args.report).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return 0 if cmp.passed else 1


def cmd_data_gen(args) -> int:
    from .harness import build_dataset, maker_plans

    scn = _scenario(args)
    ds = build_dataset(scn)
    ds.save(args.out)
    print(f"wrote {ds.n} items to {args.out}")
    if args.items:
        from .maker import Item, write_items

        write_items(args.items, [Item(k, ds.x[i], None if ds.observed[i] < 0 else int(ds.observed[i])) for i, k in enumerate(ds.keys)])
        print(f"wrote item stream to {args.items}")
    if args.config_out:
        scn.save(args.config_out)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .harness import MODES, SCENARIOS
    from .maker import TASKS

    p = argparse.ArgumentParser(prog="carls", description="Sharded knowledge bank, makers and trainers.")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="group", required=True)

    bank = sub.add_parser("bank").add_subparsers(dest="command", required=True)
    s = bank.add_parser("serve", help="serve a knowledge bank over TCP")
    s.add_argument("--endpoint", default="127.0.0.1:7070")
    s.add_argument("--namespace", action="append", type=parse_namespace, help="name:kind[:dim[:expiry_ticks]]")
    s.add_argument("--shards", type=int, default=4)
    s.add_argument("--workers", type=int, default=8)
    s.add_argument("--expiry-ms", type=float, default=None, help="flush pending gradients older than this")
    s.add_argument("--ready-file", help="written with the bound endpoint once listening")
    s.add_argument("--load", help="start from a snapshot directory")
    s.add_argument("--save", help="write a snapshot here on shutdown")
    s.add_argument("--seed", type=int, default=None, help="seed for default embedding initializers")
    s.set_defaults(func=cmd_bank_serve)

    maker = sub.add_parser("maker").add_subparsers(dest="command", required=True)
    s = maker.add_parser("run", help="poll checkpoints and push recomputed knowledge")
    s.add_argument("--task", choices=TASKS, required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--checkpoint-dir", required=True)
    s.add_argument("--input", required=True, help="item stream: key TAB base64 vector [TAB label]")
    s.add_argument("--poll-ms", type=float, default=1000.0)
    s.add_argument("--tau", type=float, default=0.9)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--sigma-min", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--metric", choices=("cosine", "neg_l2"), default="cosine")
    s.add_argument("--num-classes", type=int, default=2)
    s.add_argument("--encoder", choices=("node", "image", "text"), default="node")
    s.add_argument("--namespace", default=None)
    s.add_argument("--min-step", type=int, default=0)
    s.add_argument("--max-passes", type=int, default=None)
    s.add_argument("--timeout", type=float, default=30.0)
    s.set_defaults(func=cmd_maker_run)

    trainer = sub.add_parser("trainer").add_subparsers(dest="command", required=True)
    s = trainer.add_parser("run", help="train against a bank and write checkpoints")
    s.add_argument("--variant", choices=tuple(VARIANT_SCENARIO))
    s.add_argument("--scenario", help="scenario config file supplying defaults")
    s.add_argument("--bank", help="bank endpoint; omit for a bank-free run")
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--data", required=True, help="dataset file from `data gen`")
    s.add_argument("--metrics", default="-", help="CSV path, or - for stdout")
    s.add_argument("--lr", type=float)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--tau-c", type=float)
    s.add_argument("--rho", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--ckpt-every", type=int)
    s.add_argument("--hidden-dim", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--negatives", type=int)
    s.add_argument("--staleness", type=int, help="max steps the refresh makers may lag")
    s.add_argument("--no-barrier", action="store_true", help="never wait for makers")
    s.add_argument("--timeout", type=float, default=30.0)
    s.set_defaults(func=cmd_trainer_run)

    scenario = sub.add_parser("scenario").add_subparsers(dest="command", required=True)
    s = scenario.add_parser("run", help="run a scenario end to end")
    _scenario_args(s, SCENARIOS)
    s.add_argument("--mode", choices=MODES, default="deterministic")
    s.add_argument("--staleness", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scenario_run)
    s = scenario.add_parser("compare", help="compare two runs (directories or metrics CSVs)")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--report", help="write the comparison as JSON")
    s.set_defaults(func=cmd_scenario_compare)

    data = sub.add_parser("data").add_subparsers(dest="command", required=True)
    s = data.add_parser("gen", help="generate a synthetic dataset")
    _scenario_args(s, SCENARIOS)
    s.add_argument("--out", required=True)
    s.add_argument("--items", help="also write an item stream for makers")
    s.add_argument("--config-out", help="write the effective scenario config")
    s.set_defaults(func=cmd_data_gen)
    return p


def _scenario_args(s, names) -> None:
    group = s.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="scenario config file (JSON)")
    group.add_argument("--name", choices=names, help="start from a preset")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scenario field")
    s.add_argument("--seed", type=int)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CarlsError, FileNotFoundError, TimeoutError, ConnectionError) as exc:
        log.error("%s", exc)
        return 2
