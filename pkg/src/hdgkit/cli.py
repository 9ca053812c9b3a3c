"""Command-line workflow: synth -> split -> train -> eval -> report,
plus a gradcheck suite. Exit codes: 0 ok, 2 validation error, 3 runtime
failure."""

from __future__ import annotations

import argparse
import datetime
import fcntl
import hashlib
import json
import os
import sys
import tempfile
from fractions import Fraction

import numpy as np

from . import gradcheck as gc
from . import hdge, losses, manifest as mani, metrics, splits, synth, teacher, trainer


class CliError(SystemExit):
    def __init__(self, code: str, message: str):
        self.error_code = code
        self.message = message
        super().__init__(2)


def _fail(code: str, message: str):
    raise CliError(code, message)


def _atomic_write_text(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_targets(text: str) -> list[Fraction]:
    try:
        return [Fraction(part.strip()) for part in text.split(",") if part.strip()]
    except (ValueError, ZeroDivisionError) as e:
        _fail("bad_targets", f"cannot parse hybridness targets '{text}': {e}")


def _load_config_file(path: str | None) -> dict:
    """Flat key = value file; values parsed as JSON literals when possible,
    else kept as strings. Flags override file values, file overrides
    defaults."""
    if not path:
        return {}
    cfg = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    _fail("bad_config", f"{path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                key = key.strip().replace("-", "_")
                value = value.strip()
                try:
                    cfg[key] = json.loads(value)
                except json.JSONDecodeError:
                    cfg[key] = value
    except OSError as e:
        _fail("bad_config", f"cannot read config file: {e}")
    return cfg


def _opt(args, file_cfg: dict, key: str, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_cfg:
        return file_cfg[key]
    return default


def _config_digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _append_ledger(path: str, record: dict) -> None:
    line = json.dumps(record, sort_keys=True) + "\n"
    with open(path, "a", encoding="utf-8") as f:
        fcntl.flock(f.fileno(), fcntl.LOCK_EX)
        try:
            f.write(line)
            f.flush()
        finally:
            fcntl.flock(f.fileno(), fcntl.LOCK_UN)


def _read_ledger(path: str) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        _fail("bad_ledger", f"cannot read ledger: {e}")


def _load_data_dir(data_dir: str):
    m = mani.load_manifest(os.path.join(data_dir, "manifest.json"))
    student = hdge.load_embeddings(os.path.join(data_dir, "student_features.hdge"))
    t_img = hdge.load_embeddings(os.path.join(data_dir, "teacher_images.hdge"))
    t_txt = hdge.load_embeddings(os.path.join(data_dir, "teacher_text.hdge"))
    return m, student, t_img, t_txt


def cmd_synth(args, file_cfg: dict) -> int:
    cfg = synth.SynthConfig(
        num_known=int(_opt(args, file_cfg, "num_known", 12)),
        num_unknown=int(_opt(args, file_cfg, "num_unknown", 4)),
        num_domains=int(_opt(args, file_cfg, "num_domains", 4)),
        samples_per_class_per_domain=int(_opt(args, file_cfg, "samples_per_class", 20)),
        dim=int(_opt(args, file_cfg, "dim", 32)),
        domain_shift=float(_opt(args, file_cfg, "domain_shift", 0.3)),
        noise_sigma=float(_opt(args, file_cfg, "noise_sigma", 0.15)),
        teacher_fidelity=float(_opt(args, file_cfg, "teacher_fidelity", 0.9)),
        seed=int(_opt(args, file_cfg, "seed", 42)),
    )
    out = args.out_dir or "."
    os.makedirs(out, exist_ok=True)
    m, student, t_img, t_txt = synth.generate(cfg)
    mani.save_manifest(m, os.path.join(out, "manifest.json"))
    hdge.save_embeddings(student, os.path.join(out, "student_features.hdge"))
    hdge.save_embeddings(t_img, os.path.join(out, "teacher_images.hdge"))
    hdge.save_embeddings(t_txt, os.path.join(out, "teacher_text.hdge"))
    print(f"wrote synthetic dataset ({len(m.domains)} domains, "
          f"{m.label_space.num_known} known classes) to {out}")
    return 0


def task_filename(target_domain: str, level: Fraction) -> str:
    return f"task_{target_domain}_h{level.numerator}-{level.denominator}.json"


def cmd_split(args, file_cfg: dict) -> int:
    m = mani.load_manifest(os.path.join(args.data, "manifest.json"))
    targets = _parse_targets(_opt(args, file_cfg, "targets", "0,1/6,1/3,1"))
    seed = int(_opt(args, file_cfg, "seed", 0))
    val_fraction = float(_opt(args, file_cfg, "val_fraction", 0.1))
    tasks = splits.leave_one_domain_out(m, targets, val_fraction=val_fraction, seed=seed)
    out = args.out_dir or os.path.join(args.data, "tasks")
    os.makedirs(out, exist_ok=True)
    for task in tasks:
        name = task_filename(task.split.target_domain, task.split.hybridness_target)
        doc = splits.task_to_dict(task, m.label_space.num_known)
        _atomic_write_text(os.path.join(out, name), json.dumps(doc, indent=1) + "\n")
    print(f"wrote {len(tasks)} eval tasks to {out}")
    return 0


def _trainer_config(args, file_cfg: dict) -> trainer.TrainerConfig:
    pert = losses.PerturbationConfig(
        tau=float(_opt(args, file_cfg, "tau", 0.5)),
        alpha=float(_opt(args, file_cfg, "alpha", 0.8)),
        beta=float(_opt(args, file_cfg, "beta", 0.1)),
        lam=float(_opt(args, file_cfg, "lam", 0.01)),
    )
    return trainer.TrainerConfig(
        objective=trainer.Objective(_opt(args, file_cfg, "objective", "scipd")),
        epochs=int(_opt(args, file_cfg, "epochs", 40)),
        batch_size=int(_opt(args, file_cfg, "batch_size", 64)),
        learning_rate=float(_opt(args, file_cfg, "learning_rate", 2.0)),
        momentum=float(_opt(args, file_cfg, "momentum", 0.9)),
        weight_decay=float(_opt(args, file_cfg, "weight_decay", 0.0)),
        seed=int(_opt(args, file_cfg, "seed", 0)),
        perturbation=pert,
        unknown_threshold=float(_opt(args, file_cfg, "theta", 0.15)),
    )


def _task_descriptor(task: splits.EvalTask, cfg: trainer.TrainerConfig) -> dict:
    t = task.split.hybridness_target
    return {
        "target_domain": task.split.target_domain,
        "hybridness": f"{t.numerator}/{t.denominator}",
        "objective": cfg.objective.value,
        "seed": cfg.seed,
    }


def cmd_train(args, file_cfg: dict) -> int:
    task = splits.load_task(args.task)
    m, student, t_img, t_txt = _load_data_dir(args.data)
    cfg = _trainer_config(args, file_cfg)
    scores = None
    if cfg.objective != trainer.Objective.ERM:
        scores = teacher.teacher_scores(t_img, t_txt, lam=cfg.perturbation.lam)
    model = trainer.train(task, student, scores, t_txt, cfg)
    out = args.out or "checkpoint.hdge"
    trainer.save_checkpoint(model, out)
    cfg_doc = trainer._config_to_dict(cfg)
    record = {
        "run_id": f"train-{_config_digest({**cfg_doc, **_task_descriptor(task, cfg)})}",
        "kind": "train",
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config_digest": _config_digest(cfg_doc),
        "task": _task_descriptor(task, cfg),
        "artifacts": {"checkpoint": os.path.abspath(out)},
        "selected_epoch": model.selected_epoch,
        "val_accuracy": model.history[model.selected_epoch - 1][1],
    }
    if args.ledger:
        _append_ledger(args.ledger, record)
    print(f"trained {cfg.objective.value}: selected epoch {model.selected_epoch}, "
          f"val acc {record['val_accuracy']:.4f}, checkpoint {out}")
    return 0


def cmd_eval(args, file_cfg: dict) -> int:
    task = splits.load_task(args.task)
    m, student, _, _ = _load_data_dir(args.data)
    model = trainer.load_checkpoint(args.checkpoint)
    theta = _opt(args, file_cfg, "theta", None)
    preds = trainer.infer_open_set(
        model, student, task.test_samples, float(theta) if theta is not None else None
    )
    known = set(m.label_space.known_classes)
    unknown = set(m.label_space.unknown_classes)
    acc_k = metrics.accuracy_known(preds, known)
    acc_u = metrics.accuracy_unknown(preds, unknown)
    h = metrics.h_score(acc_k, acc_u)
    if args.predictions:
        trainer.write_predictions(preds, args.predictions)
    cfg_doc = trainer._config_to_dict(model.config)
    record = {
        "run_id": f"eval-{_config_digest({**cfg_doc, **_task_descriptor(task, model.config)})}",
        "kind": "eval",
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config_digest": _config_digest(cfg_doc),
        "task": _task_descriptor(task, model.config),
        "metrics": {"acc_known": acc_k, "acc_unknown": acc_u, "h_score": h},
        "artifacts": {"checkpoint": os.path.abspath(args.checkpoint)},
    }
    if args.ledger:
        _append_ledger(args.ledger, record)
    print(f"acc_known={acc_k:.4f} acc_unknown={acc_u:.4f} h_score={h:.4f}")
    return 0


def cmd_report(args, file_cfg: dict) -> int:
    records = _read_ledger(args.ledger)
    objective = _opt(args, file_cfg, "objective", None)
    results = {}
    for rec in records:
        if rec.get("kind") != "eval":
            continue
        if objective and rec["task"]["objective"] != objective:
            continue
        key = (rec["task"]["target_domain"], Fraction(rec["task"]["hybridness"]))
        results[key] = metrics.TaskResult(  # later runs win, keyed by cell
            target_domain=key[0],
            level=key[1],
            acc_known=rec["metrics"]["acc_known"],
            acc_unknown=rec["metrics"]["acc_unknown"],
            h_score=rec["metrics"]["h_score"],
        )
    try:
        report = metrics.aggregate(list(results.values()))
    except metrics.MetricError as e:
        _fail(e.code, str(e))
    title = f"objective={objective}" if objective else "all objectives"
    print(metrics.render_table(report, title=title))
    if args.out:
        _atomic_write_text(args.out, json.dumps(metrics.report_to_dict(report), indent=2) + "\n")
    return 0


def cmd_gradcheck(args, file_cfg: dict) -> int:
    seeds = int(_opt(args, file_cfg, "seeds", 100))
    epsilon = float(_opt(args, file_cfg, "epsilon", 1e-5))
    tolerance = float(_opt(args, file_cfg, "tolerance", 1e-6))
    worst = 0.0
    failures = 0
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        b = int(rng.integers(1, 17))
        n = int(rng.integers(2, 21))
        d = int(rng.integers(4, 33))
        cfg = losses.PerturbationConfig()
        probs = rng.dirichlet(np.ones(n), size=b)
        labels = rng.integers(0, n, size=b)
        feats = rng.standard_normal((b, d))
        texts = rng.standard_normal((n, d))
        w0 = rng.standard_normal((n, d))

        def loss_of_w(w):
            head = losses.ClassifierHead(weights=w.reshape(n, d))
            return losses.total_loss(feats, probs, labels, head, texts, cfg).total

        head = losses.ClassifierHead(weights=w0.copy())
        bd = losses.total_loss(feats, probs, labels, head, texts, cfg)
        rep = gc.finite_diff_check(loss_of_w, w0.copy(), bd.grad_weights, epsilon, tolerance)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failures += 1
            print(f"seed {seed}: {rep}", file=sys.stderr)
    print(f"gradcheck: {seeds - failures}/{seeds} passed, worst rel error {worst:.3e}")
    if failures:
        _fail("gradcheck_failed", f"{failures} of {seeds} seeds exceeded tolerance")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdgkit", description=__doc__)
    p.add_argument("--config", help="key = value config file")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        sp.add_argument("--ledger")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    for flag in ("num-known", "num-unknown", "num-domains", "samples-per-class", "dim"):
        sp.add_argument(f"--{flag}", type=int, dest=flag.replace("-", "_"))
    for flag in ("domain-shift", "noise-sigma", "teacher-fidelity"):
        sp.add_argument(f"--{flag}", type=float, dest=flag.replace("-", "_"))

    sp = sub.add_parser("split", help="build leave-one-domain-out eval tasks")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory from synth")
    sp.add_argument("--targets", help="comma-separated hybridness targets, e.g. 0,1/6,1/3,1")
    sp.add_argument("--val-fraction", type=float, dest="val_fraction")

    sp = sub.add_parser("train", help="train a head on one eval task")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--out", help="checkpoint output path")
    sp.add_argument("--objective", choices=["erm", "clipbase", "scipd"])
    for flag in ("epochs", "batch-size"):
        sp.add_argument(f"--{flag}", type=int, dest=flag.replace("-", "_"))
    for flag in ("learning-rate", "momentum", "weight-decay", "tau", "alpha", "beta", "lam", "theta"):
        sp.add_argument(f"--{flag}", type=float, dest=flag.replace("-", "_"))

    sp = sub.add_parser("eval", help="open-set inference + metrics for a checkpoint")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--theta", type=float)
    sp.add_argument("--predictions", help="write per-sample TSV here")

    sp = sub.add_parser("report", help="aggregate ledger eval records into a grid")
    common(sp)
    sp.add_argument("--objective")
    sp.add_argument("--out", help="write JSON report here")

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(sp)
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--tolerance", type=float)
    return p


HANDLERS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}

VALIDATION_ERRORS = (
    mani.ManifestError,
    hdge.FormatError,
    splits.SplitError,
    teacher.TeacherError,
    losses.LossError,
    trainer.TrainerError,
    metrics.MetricError,
    synth.SynthError,
    gc.GradCheckError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report" and not args.ledger:
        print("bad_arguments: report requires --ledger", file=sys.stderr)
        return 2
    try:
        file_cfg = _load_config_file(args.config)
        return HANDLERS[args.command](args, file_cfg)
    except CliError as e:
        print(f"{e.error_code}: {e.message}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        code = getattr(e, "code", "validation")
        print(f"{code}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io_error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
