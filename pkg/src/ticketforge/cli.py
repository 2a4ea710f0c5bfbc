"""The ticket-forge command line: experiment orchestration and persistence.

    ticket-forge <find|eval|transfer|sweep|overlap|adv-find|adv-eval>
                 --config <path> [--seed N] [--out DIR] [--resume]

Every run writes into ``<out>/<command>-<confighash>/``.  Artifact writes
are atomic (temp file, then rename) and a DONE marker closes a run;
rerunning an identical configuration reproduces identical bytes.  The
output root comes from --out, the config, or $TICKET_FORGE_OUT.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
from pathlib import Path

from .adversarial import adv_loss_fn
from .analysis import (TicketReport, make_record, mask_overlap_matrix,
                       report_emit, sparsity_sweep, transfer_matrix)
from .config import RunConfig, config_hash, echo_config, parse_config
from .data import default_suite
from .errors import ConfigError, TicketForgeError
from .experiments import Workbench, pretrain_trunk
from .masks import Mask
from .models import PRETRAIN, build_model, build_task_head
from .params import ParamStore
from .pruning import PruneConfig, evaluate_ticket, imp
from .rng import derive_seed

ENV_OUT = "TICKET_FORGE_OUT"
COMMANDS = ("find", "eval", "transfer", "sweep", "overlap", "adv-find",
            "adv-eval")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _suite_by_id():
    return {t.task_id: t for t in default_suite()}


class Run:
    """One command invocation: a config, its hash, and its artifact dir."""

    def __init__(self, command: str, config: RunConfig, out_root: Path,
                 resume: bool):
        self.command = command
        self.config = config
        self.hash = config_hash(config)
        self.out_root = out_root
        self.dir = out_root / f"{command}-{self.hash[:12]}"
        self.resume = resume
        self.wb = Workbench(arch=config.arch, seed=config.seeds[0],
                            task_budget=config.budget,
                            pretrain_budget=config.pretrain_budget,
                            train_size=config.data.train_size,
                            dev_size=config.data.dev_size,
                            imp_config=config.prune)

    @property
    def done_marker(self) -> Path:
        return self.dir / "DONE"

    def prepare(self) -> bool:
        """Create the artifact dir; returns False if the run can be skipped."""
        if self.dir.exists():
            if self.done_marker.exists():
                if self.resume:
                    print(f"[ticket-forge] {self.dir} already complete; skipping")
                    return False
                raise ConfigError(
                    f"artifacts already exist at {self.dir}; pass --resume to reuse")
            if not self.resume:
                raise ConfigError(
                    f"partial run detected at {self.dir}; pass --resume to redo "
                    "or remove the directory")
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.dir / "config.json",
                      (json.dumps(echo_config(self.config), indent=2,
                                  sort_keys=True) + "\n").encode("ascii"))
        return True

    def finish(self) -> None:
        # the binary formats stay as documented (no config hash inside), so
        # the manifest carries the run provenance for every artifact file
        import hashlib
        manifest = {"config_hash": self.hash, "command": self.command,
                    "files": {}}
        for p in sorted(self.dir.iterdir()):
            if p.name in ("manifest.json", "DONE") or p.name.endswith(".tmp"):
                continue
            manifest["files"][p.name] = hashlib.sha256(
                p.read_bytes()).hexdigest()
        _atomic_write(self.dir / "manifest.json",
                      (json.dumps(manifest, indent=2, sort_keys=True) + "\n")
                      .encode("ascii"))
        _atomic_write(self.done_marker, (self.hash + "\n").encode("ascii"))
        print(f"[ticket-forge] artifacts in {self.dir}")

    # -- shared pieces ----------------------------------------------------

    def theta0(self):
        """The configured initialization, cached on disk across commands.

        The cache key covers everything pretraining depends on, so reuse is
        byte-identical with recomputation.
        """
        kind = self.config.init
        if kind == "random":
            return build_model(self.config.arch, PRETRAIN,
                               derive_seed(self.config.seeds[0], "random-init"))
        key_src = json.dumps({
            "arch": dataclasses.asdict(self.config.arch),
            "pretrain_budget": dataclasses.asdict(self.config.pretrain_budget),
            "pretrain_size": self.config.data.pretrain_size,
            "seed": self.config.seeds[0],
            "kind": kind,
        }, sort_keys=True)
        import hashlib
        cache = (self.out_root / "shared"
                 / f"theta0-{hashlib.sha256(key_src.encode()).hexdigest()[:16]}.tkp")
        template = build_model(self.config.arch, PRETRAIN, 0)
        if cache.exists():
            store = ParamStore.load(cache, template.trunk_names,
                                    template.head_names,
                                    template.prunable_names)
            store.arch = self.config.arch
            return store
        if kind == "pretext":
            store = self.wb.theta0()
        elif kind == "textonly":
            store = self.wb.theta0_textonly()
        else:
            store = self.wb.theta0_shuffled()
        cache.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(cache, store.to_bytes())
        return store

    def task_spec(self, task_id: str):
        if task_id == PRETRAIN:
            return PRETRAIN
        return _suite_by_id()[task_id]

    def loss_fn(self):
        if self.config.adv is None:
            return None
        return adv_loss_fn(self.config.adv)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_find(run: Run, adversarial: bool) -> None:
    cfg = run.config
    task = run.task_spec(cfg.task)
    init = run.theta0()
    if task != PRETRAIN:
        init = init.with_head(build_task_head(
            cfg.arch, task, derive_seed(cfg.seeds[0], "imp-head", cfg.task)))
    loss_fn = adv_loss_fn(cfg.adv) if adversarial else None
    if adversarial and cfg.adv is None:
        raise ConfigError("adv-find needs an 'adv' config section")
    result = imp(cfg.arch, task, cfg.prune, derive_seed(cfg.seeds[0], "imp",
                                                        cfg.task),
                 budget=cfg.budget, init=init,
                 train_data=run.wb.train_data(task), loss_fn=loss_fn)
    for idx, m in enumerate(result.round_masks, start=1):
        _atomic_write(run.dir / f"mask_round_{idx:02d}.tkm", m.to_bytes())
    _atomic_write(run.dir / "mask_final.tkm", result.final_mask.to_bytes())
    for step in result.checkpoints.steps():
        _atomic_write(run.dir / f"checkpoint_{step:06d}.tkp",
                      result.checkpoints.blob(step))
    trunk_total = sum(init.entries[n].size for n in init.trunk_names)
    summary = {
        "config_hash": run.hash,
        "final_sparsity": result.final_mask.sparsity,
        "final_sparsity_over_trunk": result.final_mask.zeros / trunk_total,
        "round_sparsities": [m.sparsity for m in result.round_masks],
        "round_losses": result.round_losses,
        "mask_hash": result.final_mask.content_hash(),
    }
    _atomic_write(run.dir / "find.json",
                  (json.dumps(summary, indent=2, sort_keys=True) + "\n")
                  .encode("ascii"))


def _cmd_eval(run: Run, adversarial: bool, mask_path: str = "") -> None:
    cfg = run.config
    task = _suite_by_id()[cfg.task]
    init = run.theta0()
    if mask_path:
        mask = Mask.load(mask_path)
    else:
        mask = run.wb.imp_result(run.task_spec(cfg.task), cfg.prune).final_mask
    if adversarial and cfg.adv is None:
        raise ConfigError("adv-eval needs an 'adv' config section")
    loss_fn = adv_loss_fn(cfg.adv) if adversarial else None
    report = TicketReport()
    method = "adv_imp" if adversarial else "imp"
    for seed in cfg.seeds:
        dense = evaluate_ticket(Mask.ones_like(init), init, task, cfg.budget,
                                seed, train_data=run.wb.train_data(task),
                                dev_data=run.wb.dev_data(task)).accuracy
        res = evaluate_ticket(mask, init, task, cfg.budget, seed,
                              train_data=run.wb.train_data(task),
                              dev_data=run.wb.dev_data(task), loss_fn=loss_fn)
        report.add(make_record(cfg.task, cfg.task, mask.sparsity, seed, method,
                               res.accuracy, dense, run.hash,
                               mask.content_hash()))
    report_emit(report, run.dir / "report.csv")


def _cmd_transfer(run: Run) -> None:
    cfg = run.config
    suite = _suite_by_id()
    targets = [suite[t] for t in (cfg.tasks or tuple(suite))]
    source_ids = cfg.sources or tuple(suite) + (PRETRAIN,)
    sources = {}
    for sid in source_ids:
        result = run.wb.imp_result(run.task_spec(sid), cfg.prune)
        sources[sid] = {s: result.mask_at_sparsity(s) for s in cfg.grid}
    data = {t.task_id: (run.wb.train_data(t), run.wb.dev_data(t))
            for t in targets}
    report = transfer_matrix(sources, targets, run.theta0(), cfg.budget,
                             cfg.seeds, config_hash=run.hash, data=data)
    report_emit(report, run.dir / "transfer.csv")


def _cmd_sweep(run: Run) -> None:
    cfg = run.config
    suite = _suite_by_id()
    report = TicketReport()
    for task_id in (cfg.tasks or (cfg.task,)):
        part = sparsity_sweep(run.wb, suite[task_id], cfg.grid, cfg.methods,
                              cfg.seeds, config_hash=run.hash)
        report.extend(part.records)
    report_emit(report, run.dir / "sweep.csv")


def _cmd_overlap(run: Run) -> None:
    cfg = run.config
    if len(cfg.grid) != 1:
        raise ConfigError("overlap needs exactly one sparsity in 'grid'")
    sparsity = cfg.grid[0]
    source_ids = cfg.sources or tuple(_suite_by_id()) + (PRETRAIN,)
    masks = {}
    for sid in source_ids:
        result = run.wb.imp_result(run.task_spec(sid), cfg.prune)
        mask = result.mask_at_sparsity(sparsity)
        masks[sid] = mask
    matrix = mask_overlap_matrix(masks, require_common_sparsity=False)
    report_emit(matrix, run.dir / "overlap.csv")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ticket-forge",
        description="lottery-ticket experiments on miniature multimodal "
                    "transformers")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the first seed")
    parser.add_argument("--out", default=None, help="output root directory")
    parser.add_argument("--resume", action="store_true",
                        help="reuse complete runs / redo partial runs")
    parser.add_argument("--mask", default="",
                        help="mask file for eval/adv-eval (default: run IMP)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config)
        if args.seed is not None:
            config = dataclasses.replace(
                config, seeds=(args.seed,) + tuple(config.seeds[1:]))
        out_root = Path(args.out or config.output_dir
                        or os.environ.get(ENV_OUT, "artifacts"))
        run = Run(args.command, config, out_root, args.resume)
        print(json.dumps(echo_config(config), indent=2, sort_keys=True))
        print(f"[ticket-forge] config hash {run.hash}")
        if not run.prepare():
            return 0
        if args.command == "find":
            _cmd_find(run, adversarial=False)
        elif args.command == "adv-find":
            _cmd_find(run, adversarial=True)
        elif args.command == "eval":
            _cmd_eval(run, adversarial=False, mask_path=args.mask)
        elif args.command == "adv-eval":
            _cmd_eval(run, adversarial=True, mask_path=args.mask)
        elif args.command == "transfer":
            _cmd_transfer(run)
        elif args.command == "sweep":
            _cmd_sweep(run)
        elif args.command == "overlap":
            _cmd_overlap(run)
        run.finish()
        return 0
    except TicketForgeError as err:
        print(f"[ticket-forge] error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
