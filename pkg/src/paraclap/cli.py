"""Single entry point with subcommands for reproducible runs.

Conventions shared by every subcommand:

  * stdout carries exactly one machine-readable JSON line with the result;
    human-oriented logs, the resolved configuration and input digests go to
    stderr before any work starts;
  * randomness flows from explicit ``--seed`` flags (or the seed key of the
    training config, which ``--seed`` overrides);
  * an existing ``--out``/``--report`` target is refused unless ``--force``
    (the paraphrase command also accepts ``--resume`` to continue a killed
    run from its ledger);
  * exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
import time
from pathlib import Path

from .errors import ParaclapError

THRESHOLD_GRADCHECK = 1e-5


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _print_resolved(args: argparse.Namespace, inputs) -> None:
    _log(f"command: {args.command}")
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command"):
            continue
        _log(f"  {key} = {value}")
    for path in inputs:
        p = Path(path)
        if p.is_file():
            _log(f"input_digest {p} sha256={_sha256_file(p)}")
        elif p.is_dir():
            for sub in sorted(p.iterdir()):
                if sub.is_file():
                    _log(f"input_digest {sub} sha256={_sha256_file(sub)}")


def _refuse_existing(path: Path, force: bool, what: str = "output") -> None:
    if path.exists() and not force:
        raise ParaclapError(
            f"{what} {path} already exists; pass --force to overwrite"
        )


# --- subcommands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import SynthConfig, synth_generate

    out = Path(args.out)
    _refuse_existing(out, args.force, "output directory")
    _print_resolved(args, [])
    cfg = SynthConfig(
        n_train=args.n_train,
        n_test=args.n_test,
        d_feature=args.dim,
        noise_audio=args.noise_audio,
        noise_text=args.noise_text,
        para_noise_p1=args.para_noise_p1,
        para_noise_p2=args.para_noise_p2,
        testp_noise=args.testp_noise,
        seed=args.seed,
        attr_mod_noise=args.attr_noise,
        event_mod_noise=args.event_noise,
    )
    if out.exists():
        shutil.rmtree(out)
    train_manifest, test_manifest = synth_generate(cfg, out)
    _emit(
        {
            "command": "synth",
            "train_manifest": str(train_manifest),
            "test_manifest": str(test_manifest),
            "n_train": cfg.n_train,
            "n_test": cfg.n_test,
        }
    )
    return 0


def cmd_train(args) -> int:
    from dataclasses import replace

    from .datapack import load_manifest
    from .model import save_checkpoint
    from .trainer import parse_config, train

    out = Path(args.out)
    _refuse_existing(out, args.force, "checkpoint directory")
    config_text = Path(args.config).read_text(encoding="utf-8")
    config = parse_config(config_text)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    inputs = [args.config, args.data]
    if config.init_from:
        inputs.append(config.init_from)
    _print_resolved(args, inputs)

    dataset = load_manifest(args.data)
    eval_dataset = load_manifest(args.eval_manifest) if args.eval_manifest else None
    t0 = time.perf_counter()
    ckpt, history = train(dataset, config, eval_dataset=eval_dataset)
    if out.exists():
        shutil.rmtree(out)
    save_checkpoint(ckpt, out)
    history.write(out / "history.jsonl")
    _emit(
        {
            "command": "train",
            "checkpoint": str(out),
            "steps": len(history.steps),
            "first_loss": history.steps[0]["l_final"],
            "final_loss": history.steps[-1]["l_final"],
            "tau": ckpt.tau,
            "wall_clock_s": time.perf_counter() - t0,
        }
    )
    return 0


def cmd_eval(args) -> int:
    from .datapack import load_manifest
    from .metrics import evaluate
    from .model import load_checkpoint

    report_path = Path(args.report)
    _refuse_existing(report_path, args.force, "report file")
    _print_resolved(args, [args.manifest, args.ckpt])
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_manifest(args.manifest)
    variants = tuple(args.variants.split(","))
    directions = tuple(args.directions.split(","))
    report = evaluate(ckpt, dataset, variants=variants, directions=directions)
    report.write(report_path)
    _emit(
        {
            "command": "eval",
            "report": str(report_path),
            "variants": report.variants,
            "deltas": report.deltas,
        }
    )
    return 0


def cmd_ablate(args) -> int:
    from .datapack import load_manifest
    from .metrics import ablation_report
    from .model import load_checkpoint

    report_path = Path(args.report) if args.report else None
    if report_path:
        _refuse_existing(report_path, args.force, "report file")
    _print_resolved(args, [args.manifest, args.ckpt])
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_manifest(args.manifest)
    modified = tuple(v for v in args.modified.split(",") if v)
    table = ablation_report(ckpt, dataset, args.base, modified, k=args.k)
    if report_path:
        report_path.write_text(table.to_json(), encoding="utf-8")
    _log(table.render())
    _emit(
        {
            "command": "ablate",
            "k": table.k,
            "rows": [{"variant": n, "recall": v, "drop": d} for n, v, d in table.rows],
        }
    )
    return 0


def cmd_bootstrap(args) -> int:
    from .datapack import load_manifest
    from .metrics import bootstrap_compare, variant_scores
    from .model import load_checkpoint

    report_path = Path(args.report) if args.report else None
    if report_path:
        _refuse_existing(report_path, args.force, "report file")
    _print_resolved(args, [args.manifest, args.ckpt_a, args.ckpt_b])
    dataset = load_manifest(args.manifest)
    ckpt_a = load_checkpoint(args.ckpt_a)
    ckpt_b = load_checkpoint(args.ckpt_b)
    scores_a, t2a_rel, a2t_rel = variant_scores(ckpt_a, dataset, args.variant)
    scores_b, _, _ = variant_scores(ckpt_b, dataset, args.variant)
    if args.direction == "a2t":
        scores_a, scores_b, rel = scores_a.T, scores_b.T, a2t_rel
    else:
        rel = t2a_rel
    result = bootstrap_compare(
        scores_a,
        scores_b,
        rel,
        k=args.k,
        n_resamples=args.resamples,
        alpha=args.alpha,
        seed=args.seed,
    )
    doc = {"command": "bootstrap", "variant": args.variant, "direction": args.direction, "k": args.k}
    doc.update(result.summary())
    if report_path:
        report_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _emit(doc)
    return 0


def cmd_paraphrase(args) -> int:
    from .paraphrase import HttpChatClient, MockChatClient, run_pipeline

    out = Path(args.out)
    ledger = out / "paraphrase_ledger.jsonl"
    if ledger.exists():
        if args.force:
            ledger.unlink()
            (out / "manifest.jsonl").unlink(missing_ok=True)
        elif not args.resume:
            raise ParaclapError(
                f"{ledger} exists; pass --resume to continue or --force to start over"
            )
    elif out.exists() and any(out.iterdir()) and not (args.force or args.resume):
        raise ParaclapError(f"output directory {out} is not empty; pass --force")
    _print_resolved(args, [args.manifest])

    if args.mock:
        client = MockChatClient(seed=args.seed)
    else:
        if not args.endpoint or not args.model:
            raise ParaclapError("--endpoint and --model are required without --mock")
        client = HttpChatClient(url=args.endpoint, model=args.model)
    result = run_pipeline(
        args.manifest,
        client,
        out,
        levels=tuple(args.levels.split(",")),
        concurrency=args.concurrency,
        seed=args.seed,
    )
    _emit(
        {
            "command": "paraphrase",
            "manifest": str(result.manifest_path),
            "ledger": str(result.ledger_path),
            "items": result.n_items,
            "ok": result.n_ok,
            "quarantined": result.n_quarantined,
            "skipped": result.n_skipped,
        }
    )
    return 1 if result.n_quarantined else 0


def cmd_gradcheck(args) -> int:
    from .losses import LossWeights, gradcheck, seeded_batch

    _print_resolved(args, [])
    t0 = time.perf_counter()
    worst = 0.0
    worst_case = None
    if args.n is not None or args.dim is not None:
        if args.n is None or args.dim is None or args.seed is None:
            raise ParaclapError("single-case mode needs --seed, --n and --dim together")
        cases = [(args.seed, args.n, args.dim)]
    else:
        first = args.seed if args.seed is not None else 1
        cases = [
            (seed, (2, 4, 8)[seed % 3], (4, 16)[seed % 2])
            for seed in range(first, first + args.seeds)
        ]
    for seed, n, dim in cases:
        batch = seeded_batch(seed, n=n, dim=dim)
        err = float(
            gradcheck(batch, tau=0.07 + 0.1 * (seed % 5), w=LossWeights(), step=args.step)
        )
        if err > worst:
            worst = err
            worst_case = {"seed": seed, "n": n, "dim": dim}
    elapsed = time.perf_counter() - t0
    ok = bool(worst < THRESHOLD_GRADCHECK)
    _emit(
        {
            "command": "gradcheck",
            "max_rel_err": worst,
            "threshold": THRESHOLD_GRADCHECK,
            "cases": len(cases),
            "step": args.step,
            "worst_case": worst_case,
            "elapsed_s": elapsed,
            "ok": ok,
        }
    )
    if not ok:
        _log(f"gradcheck FAILED at {worst_case}: {worst:.3e} >= {THRESHOLD_GRADCHECK}")
    return 0 if ok else 1


def cmd_annotate_serve(args) -> int:
    from .annotate import make_server

    _print_resolved(args, [])
    server = make_server(
        args.store, media_dir=args.media, ui_dir=args.ui, host=args.host, port=args.port
    )
    host, port = server.server_address[:2]
    _emit({"command": "annotate-serve", "host": host, "port": port, "store": str(args.store)})
    sys.stdout.flush()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        server.store.close()
    return 0


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paraclap",
        description="Desk-scale toolkit for paraphrase-robust audio-text retrieval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--noise-audio", type=float, default=0.1)
    p.add_argument("--noise-text", type=float, default=0.1)
    p.add_argument("--para-noise-p1", type=float, default=0.75)
    p.add_argument("--para-noise-p2", type=float, default=1.5)
    p.add_argument("--testp-noise", type=float, default=1.5)
    p.add_argument("--attr-noise", type=float, default=None)
    p.add_argument("--event-noise", type=float, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train baseline or robust projection heads")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="train manifest")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--eval-manifest", default=None)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-variant retrieval report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--variants", default="test,test_p", help="comma-separated variant names")
    p.add_argument("--directions", default="t2a,a2t")
    p.add_argument("--report", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="recall impact of caption rewrites")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--base", default="test")
    p.add_argument("--modified", default="attr_mod,event_mod")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--report", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bootstrap", help="significance test between two checkpoints")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", default="test_p")
    p.add_argument("--direction", default="t2a", choices=("t2a", "a2t"))
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("paraphrase", help="two-step paraphrase pipeline over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", default="p1,p2")
    p.add_argument("--mock", action="store_true", help="use the offline deterministic backend")
    p.add_argument("--endpoint", default=None, help="chat completions URL")
    p.add_argument("--model", default=None)
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_paraphrase)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    p.add_argument("--seeds", type=int, default=100, help="number of seeded batches")
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=None, help="first seed, or the single-case seed")
    p.add_argument("--n", type=int, default=None, help="single-case batch size")
    p.add_argument("--dim", type=int, default=None, help="single-case embedding dim")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("annotate-serve", help="run the human-annotation HTTP service")
    p.add_argument("--store", required=True, help="session event-log directory")
    p.add_argument("--media", default=None, help="read-only audio directory")
    p.add_argument("--ui", default=None, help="static frontend bundle directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_annotate_serve)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ParaclapError, ValueError) as exc:
        _log(f"error: {exc}")
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
