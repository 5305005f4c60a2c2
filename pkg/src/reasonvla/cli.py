"""Command line entry point wiring the whole pipeline together.

One binary, six verbs: gen-data, annotate, train, eval, rollout and
viz-attn (plus plot for turning metric logs into figures). All verbs
share one config schema with the precedence defaults < config file <
flags, print the fully resolved config on the first line, and report
failures as a single machine-parseable JSON line on stderr.

The config file format is flat ``key = value`` lines: ``#`` comments,
quoted or bare strings, ints, floats. Unknown keys are errors so typos
never pass silently.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention_viz import export_heatmap, fuse_attention_map
from .data_model import Step, attach_traces, load_episodes, save_episodes
from .model import ModelConfig, generate, init_model, load_checkpoint
from .simenv import episode_stats, generate_demonstrations, rollout
from .teacher import RemoteTeacher, RuleBasedTeacher, annotate_dataset
from .tokenizer import (
    assemble_sample,
    load_vocabulary,
    prompt_prefix,
    save_vocabulary,
)
from .trainer import (
    TrainConfig,
    build_policy,
    evaluate_offline,
    train,
    vocabulary_for_episodes,
)


class CliError(ValueError):
    """Usage or configuration mistakes; reported on one stderr line."""


@dataclass(frozen=True)
class FieldSpec:
    """One knob of the run configuration: shared between the config file
    and the per-command flags, with a single documented default."""

    name: str
    type: type
    default: object
    help: str
    commands: tuple[str, ...]


SCHEMA: tuple[FieldSpec, ...] = (
    FieldSpec("seed", int, 0, "seed for data generation, training, and rollouts",
              ("gen-data", "train", "rollout")),
    FieldSpec("n", int, 500, "number of episodes to generate", ("gen-data",)),
    FieldSpec("families", str, "move_near,pick", "comma-separated task families",
              ("gen-data",)),
    FieldSpec("grid_size", int, 16, "square image size in cells", ("gen-data",)),
    FieldSpec("max_steps", int, 40, "per-episode step budget in the simulator",
              ("gen-data", "rollout")),
    FieldSpec("bins", int, 32, "quantization bins per action dimension", ("train",)),
    FieldSpec("reasoning_budget", int, 244, "token budget for the reasoning segment",
              ("train", "eval")),
    FieldSpec("lambda_r", float, 0.3, "weight of the reasoning loss", ("train", "eval")),
    FieldSpec("lr", float, 2e-4, "Adam learning rate", ("train",)),
    FieldSpec("batch", int, 32, "training and evaluation batch size", ("train", "eval")),
    FieldSpec("epochs", int, 1, "passes over the training set", ("train",)),
    FieldSpec("save_steps", int, 500, "checkpoint every this many optimizer steps",
              ("train",)),
    FieldSpec("freeze", int, 0, "number of lower transformer layers to freeze",
              ("train",)),
    FieldSpec("eval_steps", int, 0, "evaluate every this many steps (0: start and end only)",
              ("train",)),
    FieldSpec("d_model", int, 64, "transformer width", ("train",)),
    FieldSpec("n_layers", int, 4, "transformer depth", ("train",)),
    FieldSpec("n_heads", int, 4, "attention heads per layer", ("train",)),
    FieldSpec("max_seq_len", int, 544, "maximum token sequence length", ("train",)),
    FieldSpec("teacher", str, "rule", "annotation backend: rule or remote", ("annotate",)),
    FieldSpec("workers", int, 1, "parallel annotation workers", ("annotate",)),
    FieldSpec("retries", int, 3, "attempts per step before recording a failure",
              ("annotate",)),
    FieldSpec("backoff_s", float, 0.5, "base exponential backoff between retries, seconds",
              ("annotate",)),
    FieldSpec("k", int, 5, "how many layer-head candidates to fuse", ("viz-attn",)),
    FieldSpec("method", str, "max", "top-k reduction: max or mean", ("viz-attn",)),
    FieldSpec("family", str, "pick", "task family to roll out", ("rollout",)),
    FieldSpec("n_rollouts", int, 100, "number of rollout episodes", ("rollout",)),
    FieldSpec("max_reasoning_tokens", int, 64, "free-run budget before the action is decoded",
              ("rollout", "viz-attn")),
)

COMMANDS = ("gen-data", "annotate", "train", "eval", "rollout", "viz-attn", "plot")


# ---------------------------------------------------------------- config


def parse_config_file(path: str | Path) -> dict:
    """Flat key = value file; returns raw parsed values keyed by name."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from exc
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition("=")
        key, rest = key.strip(), rest.strip()
        if not sep or not key or not rest:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        values[key] = _parse_value(rest, path, lineno)
    return values


def _parse_value(text: str, path, lineno: int):
    if text[0] in "\"'":
        quote = text[0]
        end = text.find(quote, 1)
        if end < 0:
            raise CliError(f"{path}:{lineno}: unterminated string")
        return text[1:end]
    text = text.split("#", 1)[0].strip()  # bare values may carry a comment
    if text in ("true", "false"):
        return text == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def _coerce(value, spec: FieldSpec, origin: str):
    if spec.type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, spec.type) or isinstance(value, bool) is not (spec.type is bool):
        raise CliError(
            f"{origin}: key '{spec.name}' expects {spec.type.__name__}, got {value!r}")
    return value


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < flags, restricted to the command's fields."""
    file_values = parse_config_file(args.config) if args.config else {}
    known = {f.name for f in SCHEMA}
    for key in file_values:
        if key not in known:
            raise CliError(f"{args.config}: unknown config key '{key}'")
    resolved = {}
    for spec in SCHEMA:
        if command not in spec.commands:
            continue
        value = spec.default
        if spec.name in file_values:
            value = _coerce(file_values[spec.name], spec, str(args.config))
        override = getattr(args, spec.name)
        if override is not None:
            value = override
        resolved[spec.name] = value
    return resolved


# ------------------------------------------------------------- plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2) with raw text
        raise CliError(message)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _announce(command: str, cfg: dict, io: dict) -> None:
    _emit({"command": command, "resolved_config": cfg, "paths": io})


def _split_families(spec: str) -> tuple[str, ...]:
    families = tuple(part.strip() for part in spec.split(",") if part.strip())
    if not families:
        raise CliError("families must name at least one task family")
    return families


def _load_model(ckpt: str, vocab_path: str | None):
    """Checkpoint plus the vocabulary it was trained with, cross-checked."""
    vocab_file = Path(vocab_path) if vocab_path else Path(ckpt).parent / "vocab.json"
    if not vocab_file.exists():
        raise CliError(f"no vocabulary at {vocab_file}; pass --vocab explicitly")
    vocab = load_vocabulary(vocab_file)
    model, _ = load_checkpoint(ckpt, expected_vocab_hash=vocab.content_hash())
    model.eval()
    return model, vocab


def _load_dataset(data: str, traces: str | None):
    episodes = load_episodes(data)
    if traces is not None:
        episodes = attach_traces(episodes, traces)
    return episodes


# ------------------------------------------------------------- commands


def cmd_gen_data(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    episodes = generate_demonstrations(
        cfg["n"], families=_split_families(cfg["families"]), seed=cfg["seed"],
        grid_size=cfg["grid_size"], max_steps=cfg["max_steps"])
    episodes_path = out / "episodes.jsonl"
    stats_path = out / "stats.json"
    save_episodes(episodes, episodes_path)
    stats_path.write_text(json.dumps(episode_stats(episodes), indent=2, sort_keys=True) + "\n")
    _emit({"episodes": len(episodes), "episodes_path": str(episodes_path),
           "stats_path": str(stats_path)})
    return 0


def cmd_annotate(args, cfg) -> int:
    if cfg["teacher"] == "rule":
        backend = RuleBasedTeacher()
    elif cfg["teacher"] == "remote":
        backend = RemoteTeacher()
    else:
        raise CliError(f"unknown teacher '{cfg['teacher']}', expected rule or remote")
    episodes = load_episodes(args.data)
    report = annotate_dataset(
        backend, episodes, args.out, workers=cfg["workers"],
        retries=cfg["retries"], backoff_s=cfg["backoff_s"])
    # step failures are recorded in the report, not turned into an exit code:
    # a partially annotated dataset is still a usable artifact
    _emit(report.to_dict())
    return 0


def cmd_train(args, cfg) -> int:
    episodes = _load_dataset(args.data, args.traces)
    eval_episodes = None
    if args.eval_data is not None:
        eval_episodes = _load_dataset(args.eval_data, args.traces)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    vocab = vocabulary_for_episodes(episodes, bins_per_dim=cfg["bins"])
    vocab_path = out / "vocab.json"
    save_vocabulary(vocab, vocab_path)

    first = episodes[0].steps[0].observation
    model = init_model(ModelConfig(
        vocab_size=vocab.vocab_size, max_seq_len=cfg["max_seq_len"],
        d_model=cfg["d_model"], n_layers=cfg["n_layers"], n_heads=cfg["n_heads"],
        n_views=len(first.images), patch_grid=first.grid_size, seed=cfg["seed"]))
    tcfg = TrainConfig(
        out_dir=str(out), lambda_r=cfg["lambda_r"], learning_rate=cfg["lr"],
        batch_size=cfg["batch"], epochs=cfg["epochs"], freeze_layers=cfg["freeze"],
        seed=cfg["seed"], save_steps=cfg["save_steps"], eval_steps=cfg["eval_steps"],
        reasoning_budget=cfg["reasoning_budget"])
    _, metrics_path = train(model, vocab, episodes, tcfg, eval_episodes=eval_episodes)

    checkpoints = sorted(out.glob("ckpt_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
    _emit({"metrics": str(metrics_path), "vocab": str(vocab_path),
           "checkpoint": str(checkpoints[-1])})
    return 0


def cmd_eval(args, cfg) -> int:
    model, vocab = _load_model(args.ckpt, args.vocab)
    episodes = _load_dataset(args.data, args.traces)
    tcfg = TrainConfig(
        out_dir=".", lambda_r=cfg["lambda_r"], batch_size=cfg["batch"],
        reasoning_budget=cfg["reasoning_budget"])
    metrics = evaluate_offline(model, vocab, episodes, tcfg)
    _emit(metrics.to_dict())
    return 0


def cmd_rollout(args, cfg) -> int:
    model, vocab = _load_model(args.ckpt, args.vocab)
    policy = build_policy(model, vocab, max_reasoning_tokens=cfg["max_reasoning_tokens"])
    stats = rollout(
        policy, cfg["family"], n_episodes=cfg["n_rollouts"], seed=cfg["seed"],
        max_steps=cfg["max_steps"], grid_size=model.cfg.patch_grid)
    _emit(stats.to_dict())
    return 0


def cmd_viz_attn(args, cfg) -> int:
    model, vocab = _load_model(args.ckpt, args.vocab)
    episodes = {ep.episode_id: ep for ep in load_episodes(args.data)}
    if args.episode not in episodes:
        known = ", ".join(sorted(episodes)[:5])
        raise CliError(f"episode '{args.episode}' not in {args.data} (have: {known}, ...)")
    episode = episodes[args.episode]
    if not 0 <= args.step < len(episode.steps):
        raise CliError(
            f"step {args.step} out of range, episode has {len(episode.steps)} steps")
    step = episode.steps[args.step]

    prompt = prompt_prefix(assemble_sample(Step(step.observation, step.action, None), vocab))
    budget = min(cfg["max_reasoning_tokens"] + 8, model.cfg.max_seq_len - prompt.length)
    generated, record = generate(
        model, prompt, max_new=budget, record_attention=True, vocab=vocab)
    targets = [prompt.length + i for i, tok in enumerate(generated.tolist())
               if vocab.is_action_id(tok)]
    if not targets:
        raise CliError("model produced no action tokens within the budget; "
                       "train it further or raise --max-reasoning-tokens")

    maps = fuse_attention_map(record, targets, k=cfg["k"], method=cfg["method"])
    base = np.stack([np.asarray(img) for img in step.observation.images])
    out = Path(args.out)
    written = []
    for fmap in maps:
        stem = out / f"{args.episode}_step{args.step}_t{fmap.target_token_index}"
        for path in export_heatmap(fmap, base, stem):
            written.append(str(path))
    _emit({"targets": targets, "files": written})
    return 0


def cmd_plot(args, cfg) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = [json.loads(line) for line in Path(args.metrics).read_text().splitlines()]
    if not metrics:
        raise CliError(f"no metric lines in {args.metrics}")
    eval_rows = []
    if args.eval_metrics is not None:
        eval_rows = [json.loads(line) for line in Path(args.eval_metrics).read_text().splitlines()]

    fig, axes = plt.subplots(1, 2 if eval_rows else 1, figsize=(10 if eval_rows else 6, 4))
    loss_ax = axes[0] if eval_rows else axes
    steps = [row["step"] for row in metrics]
    for key in ("loss_total", "loss_action", "loss_reasoning"):
        loss_ax.plot(steps, [row[key] for row in metrics], label=key)
    loss_ax.set_xlabel("step")
    loss_ax.set_ylabel("loss")
    loss_ax.legend()
    if eval_rows:
        for key in ("action_accuracy", "reasoning_accuracy"):
            pairs = [(row["step"], row[key]) for row in eval_rows if row[key] is not None]
            if pairs:
                axes[1].plot(*zip(*pairs), marker="o", label=key)
        axes[1].set_xlabel("step")
        axes[1].set_ylabel("accuracy")
        axes[1].set_ylim(0, 1)
        axes[1].legend()
    fig.tight_layout()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    _emit({"figure": str(out)})
    return 0


# --------------------------------------------------------------- driver


def build_parser() -> _Parser:
    parser = _Parser(prog="reasonvla", description=__doc__.splitlines()[0])
    subparsers = parser.add_subparsers(dest="command", required=True,
                                       parser_class=_Parser)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", default=None,
                         help="key = value config file (default: none)")
        for spec in SCHEMA:
            if name in spec.commands:
                sub.add_argument(
                    "--" + spec.name.replace("_", "-"), dest=spec.name,
                    type=spec.type, default=None,
                    help=f"{spec.help} (default: {spec.default})")
        return sub

    sub = command("gen-data", "generate scripted expert demonstrations")
    sub.add_argument("--out", default="data", help="output directory (default: data)")

    sub = command("annotate", "write per-step reasoning traces for a dataset")
    sub.add_argument("--data", default="data/episodes.jsonl",
                     help="episode file (default: data/episodes.jsonl)")
    sub.add_argument("--out", default="traces", help="trace directory (default: traces)")

    sub = command("train", "fit a policy on demonstrations")
    sub.add_argument("--data", default="data/episodes.jsonl",
                     help="episode file (default: data/episodes.jsonl)")
    sub.add_argument("--traces", default=None,
                     help="trace directory to attach to the data (default: none)")
    sub.add_argument("--eval-data", default=None,
                     help="held-out episode file evaluated during training (default: none)")
    sub.add_argument("--out", default="runs/latest",
                     help="run directory for checkpoints and logs (default: runs/latest)")

    sub = command("eval", "offline metrics of a checkpoint on a dataset")
    sub.add_argument("--ckpt", required=True, help="checkpoint file")
    sub.add_argument("--vocab", default=None,
                     help="vocabulary file (default: vocab.json beside the checkpoint)")
    sub.add_argument("--data", default="data/episodes.jsonl",
                     help="episode file (default: data/episodes.jsonl)")
    sub.add_argument("--traces", default=None,
                     help="trace directory to attach to the data (default: none)")

    sub = command("rollout", "closed-loop success rate in the simulator")
    sub.add_argument("--ckpt", required=True, help="checkpoint file")
    sub.add_argument("--vocab", default=None,
                     help="vocabulary file (default: vocab.json beside the checkpoint)")

    sub = command("viz-attn", "fused attention heatmaps for generated action tokens")
    sub.add_argument("--ckpt", required=True, help="checkpoint file")
    sub.add_argument("--vocab", default=None,
                     help="vocabulary file (default: vocab.json beside the checkpoint)")
    sub.add_argument("--data", default="data/episodes.jsonl",
                     help="episode file (default: data/episodes.jsonl)")
    sub.add_argument("--episode", required=True, help="episode id to visualize")
    sub.add_argument("--step", type=int, default=0,
                     help="step index within the episode (default: 0)")
    sub.add_argument("--out", default="viz", help="output directory (default: viz)")

    sub = command("plot", "turn metric logs into loss and accuracy figures")
    sub.add_argument("--metrics", default="runs/latest/metrics.jsonl",
                     help="training log (default: runs/latest/metrics.jsonl)")
    sub.add_argument("--eval-metrics", default=None,
                     help="evaluation log for an accuracy panel (default: none)")
    sub.add_argument("--out", default="runs/latest/curves.png",
                     help="figure path (default: runs/latest/curves.png)")
    return parser


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "annotate": cmd_annotate,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "viz-attn": cmd_viz_attn,
    "plot": cmd_plot,
}


def run(argv: list[str]) -> int:
    """Parse argv, print the resolved config, run one subcommand.

    Returns 0 on success; 2 for usage and config mistakes; 1 for runtime
    failures. Every failure is one JSON line on stderr.
    """
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.command, args)
        io = {key: value for key, value in vars(args).items()
              if key not in cfg and key != "command" and value is not None}
        _announce(args.command, cfg, io)
        return _HANDLERS[args.command](args, cfg)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except CliError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
