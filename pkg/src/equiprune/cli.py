"""Command-line pipeline: data generation, calibration, pruning, training,
evaluation, benchmarking, and report export.

Every source of randomness is an explicit seed flag, so each subcommand is
reproducible run-to-run. Exit codes: 0 success, 2 precondition failure,
3 verification failure, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import resource
import statistics
import sys
import time
from dataclasses import replace

import numpy as np

from . import data as data_mod
from . import importance as imp_mod
from . import prune as prune_mod
from . import train as train_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import AtomicSystem, ModelConfig, ModelParams, predict, predict_batch
from .so3 import random_rotations

EXIT_PRECONDITION = 2
EXIT_VERIFICATION = 3
EXIT_DIVERGENCE = 4


class VerificationFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _species_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _parse_block_file(path) -> dict[tuple[int, int, int], float]:
    """Lenient 'layer l k value' reader used by report tooling."""
    out: dict[tuple[int, int, int], float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            parts = raw.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: expected 'layer l k value'")
            out[(int(parts[0]), int(parts[1]), int(parts[2]))] = float(parts[3])
    if not out:
        raise ValueError(f"{path}: no entries")
    return out


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Rank correlation with average ranks for ties."""

    def ranks(x: np.ndarray) -> np.ndarray:
        order = np.argsort(x, kind="stable")
        r = np.empty(len(x))
        r[order] = np.arange(len(x), dtype=np.float64)
        # average tied ranks
        vals, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
        sums = np.zeros(len(vals))
        np.add.at(sums, inverse, r)
        return sums[inverse] / counts[inverse]

    ra, rb = ranks(np.asarray(a, float)), ranks(np.asarray(b, float))
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    if denom == 0:
        return 1.0 if np.allclose(ra, rb) else 0.0
    return float((ra * rb).sum() / denom)


def _load_corpus_checked(path) -> data_mod.Corpus:
    return data_mod.read_corpus(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    teacher_config = None
    if args.generator == "teacher":
        teacher_config = data_mod.default_teacher_config(
            _species_list(args.species), seed=args.teacher_seed
        )
    corpus = data_mod.generate_corpus(
        generator=args.generator,
        n_structures=args.structures,
        conformations_per_structure=args.conformations,
        species=_species_list(args.species),
        atoms_min=args.atoms_min,
        atoms_max=args.atoms_max,
        seed=args.seed,
        teacher_config=teacher_config,
    )
    data_mod.write_corpus(corpus, args.out)
    n_atoms = sum(r.system.n_atoms for r in corpus.records)
    print(
        f"wrote {len(corpus)} records ({n_atoms} atoms, "
        f"{len(set(corpus.groups()))} structure groups, generator={args.generator}) to {args.out}"
    )
    return 0


def cmd_init(args) -> int:
    from .model import build_model, uniform_config

    config = uniform_config(
        species=_species_list(args.species),
        r_cut=args.r_cut,
        n_layers=args.layers,
        l_max=args.l_max,
        channels=args.channels,
        gated=args.gated,
        seed=args.seed,
    )
    save_checkpoint(build_model(config), args.out)
    print(f"wrote fresh {config.describe()} checkpoint to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    params = load_checkpoint(args.checkpoint)
    corpus = _load_corpus_checked(args.corpus)
    calib = data_mod.calibration_sample(corpus, args.samples_per_group, args.sample_seed)
    if args.criterion == "grad-act":
        table = imp_mod.score_gradient_activation(params, calib)
    elif args.criterion == "activation":
        table = imp_mod.score_activation(params, calib)
    elif args.criterion == "magnitude":
        table = imp_mod.score_magnitude(params)
    else:
        table = imp_mod.score_random(params.config.layouts(), args.score_seed)
    _write_text(args.out, table.to_text())
    print(
        f"wrote importance table ({args.criterion}, {len(calib)} calibration structures) to {args.out}"
    )
    return 0


def _verification_systems(config: ModelConfig, count: int, seed: int) -> list[AtomicSystem]:
    rng = np.random.default_rng(seed)
    systems = []
    for _ in range(count):
        n = int(rng.integers(6, 13))
        systems.append(data_mod.random_cluster(rng, n, config.species))
    return systems


def cmd_prune(args) -> int:
    params = load_checkpoint(args.checkpoint)
    config = params.config
    table = imp_mod.ImportanceTable.from_text(
        open(args.table, encoding="utf-8").read(), config.layouts()
    )
    target = prune_mod.TargetSpec.from_text(open(args.target, encoding="utf-8").read(), config)

    mask = prune_mod.generate_mask(table, target, config)
    if config.gated:
        mask = prune_mod.enforce_gate_coupling(mask, config)
    plan = prune_mod.make_slice_plan(
        config, mask, embedding_policy=target.embedding_policy, embedding_seed=args.embedding_seed
    )
    small = prune_mod.apply_plan(params, plan)

    notes = list(plan.notes)
    if target.depth is not None and target.depth < config.n_layers:
        small = prune_mod.depth_prune(
            small, target.depth, substitute_readout=target.readout_substitute, seed=args.substitute_seed
        )
        notes.append("depth pruned; masked-model equivalence does not apply across removed layers")

    applicable = (
        target.embedding_policy == "inherit"
        and (target.depth is None or target.depth == config.n_layers)
    )
    if applicable:
        systems = _verification_systems(config, args.verify_systems, args.verify_seed)
        report = prune_mod.verify_slice_exactness(params, plan.mask, small, systems, notes=tuple(notes))
    else:
        report = prune_mod.SliceReport(
            applicable=False,
            passed=True,
            max_energy_dev=float("nan"),
            max_force_dev=float("nan"),
            per_system=(),
            notes=tuple(notes) or ("fresh-weight policies make exactness inapplicable",),
        )

    print(report.summary())
    if args.report:
        lines = [report.summary()]
        for i, (ed, fd) in enumerate(report.per_system):
            lines.append(f"system {i}: energy_dev {ed!r} force_dev {fd!r}")
        _write_text(args.report, "\n".join(lines) + "\n")
    if report.applicable and not report.passed:
        raise VerificationFailure(report.summary())

    save_checkpoint(small, args.out)
    mask_path = args.mask_out or (str(args.out) + ".mask")
    _write_text(mask_path, plan.mask.to_text())
    print(
        f"wrote pruned checkpoint {small.config.describe()} "
        f"({small.n_parameters()} parameters, from {params.n_parameters()}) to {args.out}"
    )
    return 0


def _train_config_from_args(args) -> train_mod.TrainConfig:
    return train_mod.TrainConfig(
        epochs=args.epochs,
        energy_weight=args.energy_weight,
        force_weight=args.force_weight,
        lr=args.lr,
        weight_decay=args.weight_decay,
        ema_decay=args.ema_decay,
        clip_norm=args.clip_norm,
        batch_size=args.batch_size,
        lr_patience=args.lr_patience,
        lr_factor=args.lr_factor,
        seed=args.seed,
    )


def _cmd_train(args, mode: str) -> int:
    params = load_checkpoint(args.checkpoint)
    corpus = _load_corpus_checked(args.corpus)
    config = _train_config_from_args(args)
    report = train_mod.train_loop(params, corpus.systems(), config, mode=mode)
    save_checkpoint(report.final_params, args.out)
    ema_path = args.ema_out or (str(args.out) + ".ema")
    save_checkpoint(report.ema_params, ema_path)
    if args.curves:
        _write_text(args.curves, report.curves_csv())
    last = (
        f"loss {report.losses[-1]:.6g}, mae_f {report.mae_force[-1]:.6g}"
        if report.losses
        else "no epochs run"
    )
    print(
        f"{mode} finished in {report.wall_seconds:.1f}s over {config.epochs} epochs ({last}); "
        f"raw -> {args.out}, EMA -> {ema_path}"
    )
    return 0


def cmd_retrain(args) -> int:
    return _cmd_train(args, "retrain")


def cmd_finetune(args) -> int:
    return _cmd_train(args, "finetune")


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    corpus = _load_corpus_checked(args.corpus)
    mae_e, mae_f = train_mod.evaluate(params, corpus.systems())

    rng = np.random.default_rng(args.spot_seed)
    picks = rng.choice(len(corpus), size=min(args.spot_systems, len(corpus)), replace=False)
    rotations = random_rotations(args.spot_rotations, args.spot_seed + 1)
    worst_e = 0.0
    worst_f = 0.0
    for i in sorted(picks):
        system = corpus.records[int(i)].system
        base = predict(params, system)
        scale_e = max(abs(base.energy), 1e-30)
        for g in rotations:
            rotated = AtomicSystem(system.positions @ g.matrix.T, system.species)
            p = predict(params, rotated)
            worst_e = max(worst_e, abs(p.energy - base.energy) / scale_e)
            worst_f = max(worst_f, float(np.abs(p.forces - base.forces @ g.matrix.T).max()))
    text = _csv_text(
        [
            "mae_e_per_atom(model-energy/atom)",
            "mae_f(model-energy/length)",
            "equivariance_max_rel_energy_dev",
            "equivariance_max_force_dev(model-energy/length)",
            "n_structures",
        ],
        [[repr(mae_e), repr(mae_f), repr(worst_e), repr(worst_f), len(corpus)]],
    )
    _write_text(args.out, text)
    print(text.strip())
    return 0


def cmd_bench(args) -> int:
    params = load_checkpoint(args.checkpoint)
    if args.precision != params.config.precision:
        params = ModelParams(
            replace(params.config, precision=args.precision), dict(params.tensors)
        )
    corpus = _load_corpus_checked(args.corpus)
    systems = corpus.systems()
    batches = [
        systems[i : i + args.batch_size] for i in range(0, len(systems), args.batch_size)
    ]
    total_atoms = sum(s.n_atoms for s in systems)
    for _ in range(args.warmup):
        for chunk in batches:
            predict_batch(params, chunk)
    rates = []
    for _ in range(args.repeats):
        start = time.perf_counter()
        for chunk in batches:
            predict_batch(params, chunk)
        rates.append(total_atoms / (time.perf_counter() - start))
    throughput = statistics.median(rates)
    peak_rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    text = _csv_text(
        [
            "model",
            "precision",
            "batch_size",
            "repeats",
            "n_atoms",
            "throughput(atom/s)",
            "peak_rss(bytes)",
            "n_parameters",
        ],
        [
            [
                params.config.describe(),
                args.precision,
                args.batch_size,
                args.repeats,
                total_atoms,
                repr(throughput),
                peak_rss,
                params.n_parameters(),
            ]
        ],
    )
    _write_text(args.out, text)
    print(text.strip())
    return 0


def cmd_export_importance(args) -> int:
    entries = _parse_block_file(args.table)
    groups: dict[tuple[int, int], list[tuple[int, float]]] = {}
    for (t, l, k), score in entries.items():
        groups.setdefault((t, l), []).append((k, score))
    rows = []
    for (t, l) in sorted(groups):
        ranked = sorted(groups[(t, l)], key=lambda kv: (-kv[1], kv[0]))
        for rank, (k, score) in enumerate(ranked):
            rows.append([t, l, k, rank, repr(score)])
    text = _csv_text(["layer", "l", "k", "rank", "score"], rows)
    _write_text(args.out, text)
    print(f"wrote {len(rows)} ranked rows to {args.out}")
    return 0


def cmd_rank_stability(args) -> int:
    before = _parse_block_file(args.before)
    after = _parse_block_file(args.after)
    if args.mask:
        bits = _parse_block_file(args.mask)
        mapping = []  # (big block, small block)
        new_k: dict[tuple[int, int], int] = {}
        for (t, l, k) in sorted(bits):
            if bits[(t, l, k)] >= 0.5:
                nk = new_k.get((t, l), 0)
                mapping.append(((t, l, k), (t, l, nk)))
                new_k[(t, l)] = nk + 1
    else:
        if set(before) != set(after):
            raise ValueError("tables differ in blocks; pass --mask to map them")
        mapping = [(key, key) for key in sorted(before)]
    pre = np.array([before[b] for b, _ in mapping])
    post = np.array([after[s] for _, s in mapping])
    rho = spearman(pre, post)
    k = min(args.top_k, len(mapping))
    top_pre = set(np.argsort(-pre, kind="stable")[:k].tolist())
    top_post = set(np.argsort(-post, kind="stable")[:k].tolist())
    overlap = len(top_pre & top_post) / max(k, 1)
    text = _csv_text(
        ["scope", "n_blocks", "spearman", "top_k", "overlap_fraction"],
        [["all", len(mapping), repr(rho), k, repr(overlap)]],
    )
    _write_text(args.out, text)
    print(text.strip())
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="equiprune",
        description="Block-structured pruning pipeline for SO(3)-equivariant potentials",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labeled synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--generator", choices=("teacher", "pair"), default="teacher")
    p.add_argument("--structures", type=int, default=200)
    p.add_argument("--conformations", type=int, default=5)
    p.add_argument("--species", default="1,2")
    p.add_argument("--atoms-min", type=int, default=6)
    p.add_argument("--atoms-max", type=int, default=14)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--teacher-seed", type=int, default=12345)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("init", help="write a freshly initialized checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--species", default="1,2")
    p.add_argument("--r-cut", type=float, default=1.5)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--l-max", type=int, default=1)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--gated", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("calibrate", help="accumulate importance scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--criterion", choices=("grad-act", "activation", "magnitude", "random"), default="grad-act"
    )
    p.add_argument("--samples-per-group", type=int, default=3)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--score-seed", type=int, default=0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("prune", help="slice a checkpoint to a target architecture")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--verify-systems", type=int, default=50)
    p.add_argument("--verify-seed", type=int, default=0)
    p.add_argument("--embedding-seed", type=int, default=0)
    p.add_argument("--substitute-seed", type=int, default=0)
    p.set_defaults(func=cmd_prune)

    for name, fn in (("retrain", cmd_retrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} a checkpoint on a corpus")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--ema-out", default=None)
        p.add_argument("--curves", default=None)
        p.add_argument("--epochs", type=int, default=200)
        p.add_argument("--energy-weight", type=float, default=1.0)
        p.add_argument("--force-weight", type=float, default=10.0)
        p.add_argument("--lr", type=float, default=0.005)
        p.add_argument("--weight-decay", type=float, default=1e-8)
        p.add_argument("--ema-decay", type=float, default=0.995)
        p.add_argument("--clip-norm", type=float, default=100.0)
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--lr-patience", type=int, default=5)
        p.add_argument("--lr-factor", type=float, default=0.8)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="MAE metrics plus an equivariance spot-suite")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spot-systems", type=int, default=5)
    p.add_argument("--spot-rotations", type=int, default=5)
    p.add_argument("--spot-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="inference throughput and memory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--precision", choices=("fp64", "fp32"), default="fp64")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-importance", help="ranked CSV of an importance table")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_importance)

    p = sub.add_parser(
        "rank-stability", help="Spearman correlation and top-k overlap of two tables"
    )
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--top-k", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank_stability)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    except train_mod.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (
        CheckpointError,
        prune_mod.InfeasibleTarget,
        ValueError,
        FileNotFoundError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
