"""Constrained architecture exploration over the prototype config lattice.

A single incumbent is refined by hill climbing: each round proposes a fixed
number of one-move mutations of the incumbent, trains every candidate for
the same short budget, scores it with NetScore on validation AUC, and
adopts the best feasible candidate that beats the incumbent. Feasibility
is the strict triple (params < max, flops < max, auc > min); an infeasible
candidate is logged but never adopted, whatever its score.

The whole run is a pure function of (seed config, data, budget, rng seed);
the log is replayable line for line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .analyzer import analyze, netscore
from .errors import ConfigError
from .graph import PrototypeConfig, build_graph, seed_prototype
from .train import TrainConfig, train

__all__ = [
    "CHANNEL_NOTCHES",
    "SearchConstraints",
    "SearchBudget",
    "CandidateRecord",
    "SearchResult",
    "indicator_1r",
    "mutate",
    "search",
    "record_to_json",
    "save_search_log",
]

CHANNEL_NOTCHES = (8, 12, 16, 24, 32, 48)
MAX_BLOCKS = 3


@dataclass(frozen=True)
class SearchConstraints:
    max_params: int = 1_000_000
    max_flops: int = 1_000_000_000
    min_auc: float = 0.9
    flop_input_shape: tuple = (1, 1, 128, 128)

    def validate(self):
        if self.max_params <= 0 or self.max_flops <= 0:
            raise ConfigError("constraint bounds must be positive")
        if not 0.0 < self.min_auc < 1.0:
            raise ConfigError(f"min_auc must lie in (0,1), got {self.min_auc}")


@dataclass(frozen=True)
class SearchBudget:
    rounds: int
    candidates_per_round: int
    epochs_per_candidate: int

    def validate(self):
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.candidates_per_round < 1:
            raise ConfigError(f"candidates_per_round must be >= 1, got {self.candidates_per_round}")
        if self.epochs_per_candidate < 1:
            raise ConfigError(f"epochs_per_candidate must be >= 1, got {self.epochs_per_candidate}")


@dataclass(frozen=True)
class CandidateRecord:
    id: int
    round: int
    index: int
    parent: int | None
    mutation: str
    config: PrototypeConfig
    params: int
    flops: int
    macs: int
    val_auc: float
    u: float
    feasible: bool


@dataclass(frozen=True)
class SearchResult:
    feasible: bool
    best: CandidateRecord | None
    log: tuple


def indicator_1r(report, auc, constraints):
    """Strict operational-constraint indicator: all three must hold."""
    return (
        report.params < constraints.max_params
        and report.flops < constraints.max_flops
        and auc > constraints.min_auc
    )


def _notch_step(value, direction):
    if direction > 0:
        higher = [n for n in CHANNEL_NOTCHES if n > value]
        return higher[0] if higher else value
    lower = [n for n in CHANNEL_NOTCHES if n < value]
    return lower[-1] if lower else value


def mutate(config, rng):
    """One uniformly-drawn lattice move; clamped moves may return the input.

    Moves: grow/shrink a random stage by one block (within [1, 3]), step a
    random stage's channel count one notch along the declared ladder, or
    toggle one block's condenser.
    """
    config = config.normalized()
    chans = list(config.stage_channels)
    blocks = list(config.blocks_per_stage)
    flags = [list(s) for s in config.condensers]
    move = int(rng.integers(3))
    stage = int(rng.integers(len(blocks)))
    if move == 0:
        delta = 1 if rng.integers(2) else -1
        new = min(MAX_BLOCKS, max(1, blocks[stage] + delta))
        desc = f"blocks stage{stage} {blocks[stage]}->{new}"
        blocks[stage] = new
        flags[stage] = (flags[stage] + [True] * new)[:new]
    elif move == 1:
        direction = 1 if rng.integers(2) else -1
        new = _notch_step(chans[stage], direction)
        desc = f"channels stage{stage} {chans[stage]}->{new}"
        chans[stage] = new
    else:
        block = int(rng.integers(blocks[stage]))
        flags[stage][block] = not flags[stage][block]
        state = "on" if flags[stage][block] else "off"
        desc = f"condenser stage{stage} block{block} {state}"
    out = replace(
        config,
        stage_channels=tuple(chans),
        blocks_per_stage=tuple(blocks),
        condensers=tuple(tuple(s) for s in flags),
    )
    return out, desc


def _evaluate(config, constraints, budget, train_set, val_set, build_seed, train_seed):
    graph = build_graph(seed_prototype(config), config.input_shape, rng_seed=build_seed)
    tc = TrainConfig(seed=train_seed, epochs=budget.epochs_per_candidate, lr=0.01)
    _, hist = train(graph, train_set, val_set, tc)
    report = analyze(graph, input_shape=constraints.flop_input_shape)
    auc = hist.best_val_auc
    # an AUC of exactly 0 is outside netscore's log domain; such a candidate
    # can never be feasible, so give it the limiting score instead of failing
    u = netscore(auc, report.params, report.macs) if auc > 0.0 else float("-inf")
    feasible = indicator_1r(report, auc, constraints)
    return report, auc, u, feasible


def search(seed_config, constraints, budget, train_set, val_set, seed=0):
    """Hill-climb from seed_config; returns SearchResult with the full log.

    The seed must already satisfy the params/flops constraints (its AUC is
    only known after training). The log always contains exactly
    1 + rounds * candidates_per_round records in (round, index) order.
    """
    constraints.validate()
    budget.validate()
    seed_config = seed_config.normalized()

    seed_report = analyze(
        build_graph(seed_prototype(seed_config), seed_config.input_shape, rng_seed=0),
        input_shape=constraints.flop_input_shape,
    )
    if seed_report.params >= constraints.max_params or seed_report.flops >= constraints.max_flops:
        raise ConfigError(
            f"seed config infeasible before training: params={seed_report.params}, "
            f"flops={seed_report.flops} vs bounds {constraints.max_params}/{constraints.max_flops}")

    master = np.random.default_rng(seed)
    log = []

    def run_candidate(cid, rnd, idx, parent, mutation, config):
        build_seed = int(master.integers(0, 2**31 - 1))
        train_seed = int(master.integers(0, 2**31 - 1))
        report, auc, u, feasible = _evaluate(
            config, constraints, budget, train_set, val_set, build_seed, train_seed)
        rec = CandidateRecord(
            id=cid, round=rnd, index=idx, parent=parent, mutation=mutation,
            config=config, params=report.params, flops=report.flops, macs=report.macs,
            val_auc=auc, u=u, feasible=feasible)
        log.append(rec)
        return rec

    incumbent = run_candidate(0, 0, 0, None, "seed", seed_config)
    next_id = 1
    for rnd in range(1, budget.rounds + 1):
        challengers = []
        for idx in range(budget.candidates_per_round):
            cand_cfg, desc = mutate(incumbent.config, master)
            rec = run_candidate(next_id, rnd, idx, incumbent.id, desc, cand_cfg)
            next_id += 1
            challengers.append(rec)
        feasible_better = [
            c for c in challengers
            if c.feasible and (not incumbent.feasible or c.u > incumbent.u)
        ]
        if feasible_better:
            incumbent = max(feasible_better, key=lambda c: c.u)

    if not incumbent.feasible:
        return SearchResult(feasible=False, best=None, log=tuple(log))
    return SearchResult(feasible=True, best=incumbent, log=tuple(log))


# ---------------------------------------------------------------------------
# log serialization


def record_to_json(rec):
    cfg = rec.config
    return json.dumps(
        {
            "id": rec.id,
            "round": rec.round,
            "index": rec.index,
            "parent": rec.parent,
            "mutation": rec.mutation,
            "config": {
                "stage_channels": list(cfg.stage_channels),
                "blocks_per_stage": list(cfg.blocks_per_stage),
                "condensers": [list(s) for s in cfg.condensers],
            },
            "params": rec.params,
            "flops": rec.flops,
            "macs": rec.macs,
            "val_auc": rec.val_auc,
            "u": rec.u,
            "feasible": rec.feasible,
        },
        sort_keys=True,
    )


def save_search_log(log, path):
    """JSON-lines, one CandidateRecord per line, canonical order."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(record_to_json(rec) + "\n")
