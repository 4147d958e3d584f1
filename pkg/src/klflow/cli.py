"""Command-line surface: train, generate, eval, oracle-check, sweep.

Config precedence is CLI flag > JSON config file > built-in default, and
the fully resolved config is written next to the outputs so any run can be
reproduced from its artifacts alone. Exit codes: 0 success, 2 input or
config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

from .errors import InputError, NumericError


def _dataclass_from(config: dict, section: str, overrides: dict, cls):
    """Merge config-file section and non-None CLI overrides into ``cls``."""
    merged = dict(config.get(section, {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    valid = {f.name for f in fields(cls)}
    unknown = set(merged) - valid
    if unknown:
        raise InputError(f"unknown {section} field(s): {sorted(unknown)}")
    try:
        return cls(**merged)
    except TypeError as e:
        raise InputError(f"bad {section} config: {e}") from e


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise InputError(f"cannot read config file: {e}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"config file is not valid JSON: {e}") from e


def _thread_limit(n: int):
    """BLAS thread cap; --threads 1 is the strict-deterministic mode."""
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=n)
    except ImportError:  # pragma: no cover - present in this environment
        import contextlib
        return contextlib.nullcontext()


def _load_corpus(config: dict, overrides: dict):
    """Build (CorpusStore, vocab_meta) from the corpus section.

    kinds: 'text' (path + byte/char vocab), 'toy' (Markov language, inline
    spec or spec_path), 'tokens' (one space-separated id sequence per line).
    """
    import numpy as np
    from .data import (MarkovToyLanguage, build_vocab, sample_toy_corpus,
                       windows_from_text, CorpusStore)

    section = dict(config.get("corpus", {}))
    section.update({k: v for k, v in overrides.items() if v is not None})
    kind = section.get("kind", "text")
    seq_len = int(section.get("seq_len", 32))
    if kind == "text":
        path = section.get("path")
        if not path:
            raise InputError("corpus.path is required for text corpora")
        if not Path(path).exists():
            raise InputError(f"corpus.path does not exist: {path}")
        text = Path(path).read_text(encoding="utf-8")
        vocab = build_vocab(text, section.get("mode", "byte"))
        store = windows_from_text(text, vocab, seq_len,
                                  section.get("doc_separator"))
        meta = {"kind": section.get("mode", "byte"),
                "token_to_id": vocab.token_to_id, "seq_len": seq_len}
        return store, meta
    if kind == "toy":
        if "spec_path" in section and section["spec_path"]:
            spec_path = Path(section["spec_path"])
            if not spec_path.exists():
                raise InputError(f"corpus.spec_path does not exist: {spec_path}")
            lang = MarkovToyLanguage.from_json(spec_path.read_text())
        else:
            lang = MarkovToyLanguage.random(
                int(section.get("vocab_size", 16)),
                seed=int(section.get("language_seed", 0)),
                concentration=float(section.get("concentration", 0.3)))
        num = int(section.get("num_sequences", 10_000))
        rng = np.random.default_rng(int(section.get("sample_seed", 0)))
        store = sample_toy_corpus(lang, num, seq_len, rng)
        meta = {"kind": "toy", "seq_len": seq_len,
                "language": json.loads(lang.to_json())}
        return store, meta
    if kind == "tokens":
        path = section.get("path")
        if not path or not Path(path).exists():
            raise InputError(f"corpus.path does not exist: {path}")
        rows = _read_token_lines(Path(path))
        vocab_size = int(section.get("vocab_size", int(rows.max()) + 1))
        store = CorpusStore(rows, vocab_size=vocab_size)
        return store, {"kind": "tokens", "seq_len": rows.shape[1],
                       "vocab_size": vocab_size}
    raise InputError(f"unknown corpus kind {kind!r}")


def _read_token_lines(path: Path):
    import numpy as np
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            rows.append([int(x) for x in line.split()])
    if not rows:
        raise InputError(f"no token rows in {path}")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise InputError("token rows have inconsistent lengths")
    return np.array(rows, dtype=np.int64)


def _write_resolved(out_dir: Path, resolved: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _detokenize(decoded, vocab_meta: dict) -> str:
    from .data import Vocab
    kind = vocab_meta.get("kind", "toy")
    if kind in ("byte", "char"):
        vocab = Vocab(mode=kind, token_to_id=vocab_meta.get("token_to_id", {}))
        text = vocab.decode(decoded)
        return text.replace("\\", "\\\\").replace("\n", "\\n")
    return " ".join(str(int(t)) for t in decoded)


# --- subcommands -----------------------------------------------------------

def cmd_train(args) -> int:
    from .model import TransformerConfig
    from .training import TrainConfig, train

    config = _load_config(args.config)
    corpus, vocab_meta = _load_corpus(config, {
        "path": args.corpus, "seq_len": args.seq_len, "kind": args.corpus_kind,
    })
    train_cfg = _dataclass_from(config, "train", {
        "steps": args.steps, "batch_size": args.batch_size, "lr": args.lr,
        "seed": args.seed, "beta": args.beta, "eval_every": args.eval_every,
        "checkpoint_every": args.checkpoint_every,
    }, TrainConfig)
    model_section = dict(config.get("model", {}))
    model_section.setdefault("vocab_size", corpus.vocab_size)
    model_section.setdefault("max_seq_len", corpus.seq_len)
    for name, val in (("layers", args.layers), ("heads", args.heads),
                      ("embed_dim", args.embed_dim),
                      ("time_conditioning", args.time_conditioning)):
        if val is not None:
            model_section[name] = val
    model_cfg = TransformerConfig(**model_section)

    out_dir = Path(args.output_dir or config.get("output_dir", "runs/train"))
    resolved = {
        "command": "train",
        "corpus": {**config.get("corpus", {}),
                   **({"path": args.corpus} if args.corpus else {}),
                   **({"seq_len": args.seq_len} if args.seq_len else {}),
                   **({"kind": args.corpus_kind} if args.corpus_kind else {})},
        "train": train_cfg.to_dict(),
        "model": model_cfg.to_dict(),
        "output_dir": str(out_dir),
        "threads": args.threads,
    }
    _write_resolved(out_dir, resolved)

    result = train(corpus, train_cfg, model_cfg, out_dir=out_dir,
                   log=lambda msg: print(msg, file=sys.stderr))
    # re-save the final checkpoint with vocab info for generation
    from .checkpoint import save_checkpoint
    save_checkpoint(result.model.params, {
        "step": train_cfg.steps, "seed": train_cfg.seed,
        "train_config": train_cfg.to_dict(), "model_config": model_cfg.to_dict(),
        "vocab": vocab_meta,
    }, out_dir / "model_final.ckpt")
    print(f"final loss {result.final_loss:.4f}; checkpoint at "
          f"{out_dir / 'model_final.ckpt'}")
    return 0


def _load_model(ckpt_path: str):
    from .checkpoint import load_checkpoint
    from .model import TransformerConfig, TransformerDenoiser, param_shapes

    if not Path(ckpt_path).exists():
        raise InputError(f"checkpoint does not exist: {ckpt_path}")
    params, meta = load_checkpoint(ckpt_path)
    model_cfg = TransformerConfig.from_dict(meta["model_config"])
    load_checkpoint(ckpt_path, expected_shapes=param_shapes(model_cfg))
    return TransformerDenoiser(params, model_cfg), meta


def _parse_clamp(spec: str | None):
    from .inference import ClampMask
    if not spec:
        return None
    positions = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            pos, tok = part.split("=")
            positions[int(pos)] = int(tok)
        except ValueError:
            raise InputError(f"bad clamp entry {part!r}; expected pos=token") from None
    return ClampMask(positions)


def cmd_generate(args) -> int:
    import numpy as np
    from .inference import InferenceConfig, run_inference, trajectory_csv_rows

    config = _load_config(args.config)
    model, meta = _load_model(args.checkpoint)
    infer_cfg = _dataclass_from(config, "inference", {
        "scheme": args.scheme, "steps": args.steps, "top_k": args.top_k,
        "t_star": args.t_star, "seed": args.seed, "beta": args.beta,
    }, InferenceConfig)
    vocab_meta = meta.get("vocab", {"kind": "toy"})
    seq_len = args.seq_len or int(vocab_meta.get("seq_len",
                                                 model.cfg.max_seq_len))
    clamp = _parse_clamp(args.clamp)
    out_dir = Path(args.output_dir or config.get("output_dir", "runs/generate"))
    resolved = {
        "command": "generate", "checkpoint": args.checkpoint,
        "inference": {k: getattr(infer_cfg, k) for k in (
            "scheme", "steps", "step_size", "beta", "top_k", "t_star", "seed",
            "smoothing_denominator")},
        "count": args.count, "seq_len": seq_len, "clamp": args.clamp,
        "output_dir": str(out_dir), "threads": args.threads,
    }
    _write_resolved(out_dir, resolved)

    record = args.trajectory_csv is not None
    trajectories = run_inference(model, infer_cfg, seq_len, count=args.count,
                                 clamp=clamp, record_states=record)
    out_path = out_dir / (args.output_name or "generated.txt")
    with open(out_path, "w", encoding="utf-8") as f:
        for traj in trajectories:
            f.write(_detokenize(traj.decoded, vocab_meta) + "\n")
    if record:
        with open(args.trajectory_csv, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "t", "position", "argmax_token", "argmax_prob"])
            for row in trajectory_csv_rows(trajectories[0]):
                writer.writerow(row)
            f.write("decoded," + _detokenize(trajectories[0].decoded, vocab_meta) + "\n")
    print(f"wrote {len(trajectories)} sequences to {out_path}")
    return 0


def _corpus_from_token_file(path: str, vocab_size: int):
    from .data import CorpusStore
    rows = _read_token_lines(Path(path))
    return CorpusStore(rows, vocab_size=vocab_size)


def cmd_eval(args) -> int:
    from .metrics import evaluate

    config = _load_config(args.config)
    real, real_meta = _load_corpus(config, {
        "path": args.real, "kind": args.corpus_kind, "seq_len": args.seq_len,
    })
    if not Path(args.generated).exists():
        raise InputError(f"generated file does not exist: {args.generated}")
    generated = _corpus_from_token_file(args.generated, real.vocab_size)
    report = evaluate(generated, real)
    out_dir = Path(args.output_dir or config.get("output_dir", "runs/eval"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    log_path = out_dir / "eval_log.csv"
    new = not log_path.exists()
    with open(log_path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(["entropy_nats", "ref_perplexity", "unigram_tv",
                             "bigram_tv", "num_sequences"])
        writer.writerow([f"{report.entropy_nats:.6f}",
                         f"{report.ref_perplexity:.6f}",
                         f"{report.unigram_tv:.6f}", f"{report.bigram_tv:.6f}",
                         report.num_sequences])
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_oracle_check(args) -> int:
    import numpy as np
    from .oracle import (TinyInstance, compare_tabular_to_cell_average,
                         decoded_distribution, integrate_exact_ode)
    from .tabular import fit_tabular_denoiser

    p1 = np.array([float(x) for x in args.p1.split(",")])
    instance = TinyInstance(vocab_size=args.vocab_size, seq_len=args.instance_seq_len,
                            p1=p1 / p1.sum(), beta=args.beta)
    rng = np.random.default_rng(args.seed)
    states, ts, targets = instance.sample_generative(args.samples, rng)
    tab = fit_tabular_denoiser(states, ts, targets, instance.vocab_size,
                               grid_resolution=args.grid_resolution,
                               time_buckets=args.time_buckets)
    posterior = compare_tabular_to_cell_average(instance, tab,
                                                num_points=args.grid_points)
    decoded, _ = integrate_exact_ode(instance, args.ode_trajectories,
                                     args.ode_steps, rng)
    ode_tv = 0.5 * float(np.abs(
        decoded_distribution(decoded, instance) - instance.p1).sum())
    report = {
        "instance": {"vocab_size": instance.vocab_size,
                     "seq_len": instance.seq_len,
                     "p1": instance.p1.tolist(), "beta": instance.beta},
        "resolution": {"grid": args.grid_resolution,
                       "time_buckets": args.time_buckets,
                       "samples": args.samples},
        "mean_tv": posterior["mean_tv"],
        "max_tv": posterior["max_tv"],
        "ode_tv": ode_tv,
        "pass": bool(posterior["mean_tv"] <= args.mean_tv_threshold
                     and posterior["max_tv"] <= args.max_tv_threshold
                     and ode_tv <= args.ode_tv_threshold),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.report_json:
        Path(args.report_json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report_json).write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_sweep(args) -> int:
    import numpy as np
    from .inference import InferenceConfig, run_inference
    from .metrics import ReferenceModel, evaluate
    from .data import CorpusStore

    config = _load_config(args.config)
    model, meta = _load_model(args.checkpoint)
    real, _ = _load_corpus(config, {
        "path": args.real, "kind": args.corpus_kind, "seq_len": args.seq_len,
    })
    if real.vocab_size != model.vocab_size:
        raise InputError("real corpus vocabulary does not match the model")
    values = []
    seen = set()
    for raw in args.values.split(","):
        raw = raw.strip()
        if not raw:
            continue
        val = float(raw) if args.axis == "t_star" else int(raw)
        if val in seen:
            print(f"warning: duplicate sweep value {val} ignored", file=sys.stderr)
            continue
        seen.add(val)
        values.append(val)
    if len(values) < 2:
        raise InputError("sweep needs at least 2 distinct values")

    base = dict(config.get("inference", {}))
    if args.scheme is not None:
        base["scheme"] = args.scheme
    if args.axis == "t_star":
        base["scheme"] = "hybrid"
    base.setdefault("scheme", "sampling")
    seq_len = args.seq_len or int(meta.get("vocab", {}).get("seq_len",
                                                            model.cfg.max_seq_len))
    out_dir = Path(args.output_dir or config.get("output_dir", "runs/sweep"))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(out_dir, {
        "command": "sweep", "axis": args.axis, "values": values,
        "checkpoint": args.checkpoint, "inference": base, "count": args.count,
        "seq_len": seq_len, "output_dir": str(out_dir), "threads": args.threads,
    })
    ref = ReferenceModel(real)
    csv_path = out_dir / (args.metrics_out or "sweep.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([args.axis, "entropy_nats", "ref_perplexity",
                         "unigram_tv", "bigram_tv"])
        for val in values:
            cfg_kwargs = dict(base)
            if args.axis == "t_star":
                cfg_kwargs["t_star"] = val
            elif args.axis == "top_k":
                cfg_kwargs["top_k"] = val
            else:  # nfe
                cfg_kwargs["steps"] = val
            infer_cfg = _dataclass_from({}, "inference", cfg_kwargs, InferenceConfig)
            trajs = run_inference(model, infer_cfg, seq_len, count=args.count)
            generated = CorpusStore(
                np.stack([t.decoded for t in trajs]), vocab_size=model.vocab_size)
            report = evaluate(generated, real, ref)
            writer.writerow([val, f"{report.entropy_nats:.6f}",
                             f"{report.ref_perplexity:.6f}",
                             f"{report.unigram_tv:.6f}",
                             f"{report.bigram_tv:.6f}"])
            print(f"{args.axis}={val}: perplexity {report.ref_perplexity:.3f} "
                  f"entropy {report.entropy_nats:.3f}", file=sys.stderr)
    print(f"wrote {len(values)} sweep rows to {csv_path}")
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="klflow",
        description="Flow matching for discrete sequences along KL geodesics")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--output-dir", help="directory for outputs")
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS thread cap; 1 (default) is strict-deterministic")

    p = sub.add_parser("train", help="train a denoiser")
    common(p)
    p.add_argument("--corpus", help="corpus text file (overrides config)")
    p.add_argument("--corpus-kind", choices=["text", "toy", "tokens"])
    p.add_argument("--seq-len", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--time-conditioning",
                   choices=["layer_norm_modulation", "time_token", "additive"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample sequences from a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--scheme", choices=["basic", "semi_sampling", "sampling", "hybrid"])
    p.add_argument("--steps", type=int, help="number of function evaluations N")
    p.add_argument("--top-k", type=int)
    p.add_argument("--t-star", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--clamp", help="fixed positions, e.g. '0=12,5=3'")
    p.add_argument("--trajectory-csv", help="dump the first trajectory as CSV")
    p.add_argument("--output-name", help="output filename (default generated.txt)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score a generated token file against real data")
    common(p)
    p.add_argument("--generated", required=True,
                   help="token file: one space-separated id sequence per line")
    p.add_argument("--real", help="real corpus file (overrides config)")
    p.add_argument("--corpus-kind", choices=["text", "toy", "tokens"])
    p.add_argument("--seq-len", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle-check",
                       help="validate optimal-denoiser theory on a tiny instance")
    common(p)
    p.add_argument("--vocab-size", type=int, default=3)
    p.add_argument("--instance-seq-len", type=int, default=1)
    p.add_argument("--p1", default="0.5,0.3,0.2",
                   help="comma-separated data distribution over V^S sequences")
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--grid-resolution", type=int, default=12)
    p.add_argument("--time-buckets", type=int, default=10)
    p.add_argument("--grid-points", type=int, default=200)
    p.add_argument("--ode-trajectories", type=int, default=20_000)
    p.add_argument("--ode-steps", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mean-tv-threshold", type=float, default=0.05)
    p.add_argument("--max-tv-threshold", type=float, default=0.15)
    p.add_argument("--ode-tv-threshold", type=float, default=0.03)
    p.add_argument("--report-json", help="also write the JSON report here")
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("sweep", help="sweep an inference parameter and score each value")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--axis", required=True, choices=["t_star", "top_k", "nfe"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--real", help="real corpus file (overrides config)")
    p.add_argument("--corpus-kind", choices=["text", "toy", "tokens"])
    p.add_argument("--scheme", choices=["basic", "semi_sampling", "sampling", "hybrid"])
    p.add_argument("--count", type=int, default=200,
                   help="sequences generated per sweep value")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--metrics-out", help="CSV filename (default sweep.csv)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        detail = f" at step {e.step}" if e.step is not None else ""
        ckpt = f"; last good checkpoint: {e.last_checkpoint}" if e.last_checkpoint else ""
        print(f"numeric failure{detail}: {e}{ckpt}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
