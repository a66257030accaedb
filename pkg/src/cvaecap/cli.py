"""Command-line pipeline: gen-corpus, train, sample, eval, control.

Settings resolve in increasing priority: built-in defaults, top-level keys
of the ``--config`` JSON file, the file's section named after the command,
then explicit flags.  Every artifact records the resolved settings and the
tool version.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .corpus import DEFAULT_LEXICON, category_index, generate_corpus, load_corpus, save_corpus
from .evalsuite import METRICS, CandidateSet, evaluate_sets
from .sampling import control_scene, sample_candidates, tune_test_std
from .training import (VARIANTS, CheckpointError, TrainConfig, TrainingError, build_model,
                       load_checkpoint, save_checkpoint, train)

log = logging.getLogger("cvaecap")

CONFIG_VERSION = 1
CAND_FORMAT = "cvaecap-candidates"
REPORT_FORMAT = "cvaecap-report"

DEFAULTS = {
    "gen-corpus": {"K": 8, "n_train": 2000, "n_val": 200, "n_test": 200, "seed": 0,
                   "miss_rate": 0.1, "false_rate": 0.02},
    "train": {"variant": "ag-cvae", "resume": None, "log": None,
              **{k: v for k, v in TrainConfig().to_dict().items() if k not in ("variant", "K", "feat_dim")}},
    "sample": {"split": "test", "scene_ids": None, "n_z": 20, "test_std": "tune",
               "std_grid": [0.1, 1.0, 2.0], "beam_width": 10, "seed": 0},
    "eval": {"split": "test", "m_neighbors": 16, "top_m": 10, "table": None},
    "control": {"add": [], "remove": [], "n_z": 20, "test_std": 1.0, "seed": 0},
}


class UsageError(Exception):
    pass


def _csv(kind):
    def parse(text):
        return [kind(t) for t in text.split(",") if t.strip()]
    return parse


def _std(text):
    return text if text == "tune" else float(text)


def build_parser():
    p = argparse.ArgumentParser(prog="cvaecap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, help="JSON config file")
        return sp

    g = command("gen-corpus", "generate the synthetic corpus")
    g.add_argument("--out", required=True, type=Path, help="output directory")
    g.add_argument("--K", type=int)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--miss-rate", type=float)
    g.add_argument("--false-rate", type=float)
    g.add_argument("--seed", type=int)

    t = command("train", "train one model variant")
    t.add_argument("--corpus", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path, help="checkpoint path")
    t.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
    t.add_argument("--resume", type=Path, help="continue from this checkpoint up to --epochs in total")
    t.add_argument("--log", type=Path, help="per-epoch metrics (JSON lines)")
    for name, kind in (("epochs", int), ("lr0", float), ("halve_every", int), ("latent_dim", int),
                       ("sigma_train", float), ("fixed_sigma", float), ("kl_weight", float),
                       ("clip_value", float), ("embed_dim", int), ("hidden_dim", int),
                       ("max_len", int), ("seed", int)):
        t.add_argument("--" + name.replace("_", "-"), type=kind, dest=name)

    s = command("sample", "draw candidate captions")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--corpus", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path, help="candidate file (JSON lines)")
    s.add_argument("--split", choices=["val", "test"])
    s.add_argument("--scene-ids", type=_csv(int), help="comma-separated scene ids")
    s.add_argument("--n-z", type=int)
    s.add_argument("--test-std", type=_std, help="number, or 'tune' to pick from --std-grid on val")
    s.add_argument("--std-grid", type=_csv(float))
    s.add_argument("--beam-width", type=int)
    s.add_argument("--seed", type=int)

    e = command("eval", "score candidate files")
    e.add_argument("--corpus", required=True, type=Path)
    e.add_argument("--candidates", required=True, type=Path, nargs="+")
    e.add_argument("--out", required=True, type=Path, help="report (JSON lines)")
    e.add_argument("--table", type=Path, help="also write the text table here")
    e.add_argument("--split", choices=["val", "test"])
    e.add_argument("--m-neighbors", type=int)
    e.add_argument("--top-m", type=int)

    c = command("control", "what-if generation under edited categories")
    c.add_argument("--checkpoint", required=True, type=Path)
    c.add_argument("--corpus", required=True, type=Path)
    c.add_argument("--scene-id", required=True, type=int)
    c.add_argument("--add", type=_csv(str), help="category names to add")
    c.add_argument("--remove", type=_csv(str), help="category names to remove")
    c.add_argument("--n-z", type=int)
    c.add_argument("--test-std", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", type=Path, help="write the result as JSON")
    return p


def resolve_config(args):
    """Merge defaults, config file and flags into one plain dict."""
    cfg = dict(DEFAULTS[args.command])
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise UsageError(f"unsupported config version {data.get('version')}")
        cfg.update({k: v for k, v in data.items() if k in cfg})
        section = data.get(args.command, {})
        unknown = set(section) - set(cfg)
        if unknown:
            raise UsageError(f"unknown {args.command} settings in config: {sorted(unknown)}")
        cfg.update(section)
    for k, v in vars(args).items():
        if k in ("command", "config", "verbose") or v is None:
            continue
        if isinstance(v, list):
            v = [str(x) if isinstance(x, Path) else x for x in v]
        cfg[k] = str(v) if isinstance(v, Path) else v
    return cfg


def _provenance(cfg, command):
    return {"tool_version": __version__, "command": command, "config": cfg}


def _write_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dumps(obj):
    return json.dumps(obj, sort_keys=True)


def _load_corpus(path):
    try:
        return load_corpus(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load corpus {path}: {exc}") from exc


def _load_model(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(cfg):
    for key in ("n_train", "n_val", "n_test"):
        if cfg[key] < 1:
            raise UsageError(f"{key} must be >= 1")
    try:
        corpus = generate_corpus(K=cfg["K"], n_train=cfg["n_train"], n_val=cfg["n_val"], n_test=cfg["n_test"],
                                 seed=cfg["seed"], miss_rate=cfg["miss_rate"], false_rate=cfg["false_rate"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    save_corpus(corpus, cfg["out"], extra_header=_provenance(cfg, "gen-corpus"))
    print(f"wrote {cfg['out']}: train {len(corpus.train)}, val {len(corpus.val)}, "
          f"test {len(corpus.test)} scenes, vocabulary {len(corpus.vocab)} tokens, K={corpus.K}")
    return corpus


def cmd_train(cfg):
    if cfg["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant {cfg['variant']!r}; choose from {', '.join(VARIANTS)}")
    corpus = _load_corpus(cfg["corpus"])
    names = set(TrainConfig().to_dict())
    if cfg["resume"]:
        model = _load_model(cfg["resume"])
        if model.variant != cfg["variant"]:
            raise UsageError(f"checkpoint holds {model.variant}, not {cfg['variant']}")
        model.config.epochs = cfg["epochs"]
    else:
        settings = {k: v for k, v in cfg.items() if k in names}
        try:
            tc = TrainConfig(**{**settings, "K": corpus.K})
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        model = build_model(tc, corpus.vocab)
    model.run_config = _provenance(cfg, "train")
    remaining = model.config.epochs - model.epoch
    log_lines = []
    if cfg["log"]:
        log_lines.append(_dumps({"format": "cvaecap-metrics", **_provenance(cfg, "train")}))

    def on_epoch(rec):
        log_lines.append(_dumps(rec))
        print(f"epoch {rec['epoch']:3d}  lr {rec['lr']:.5f}  recon {rec['recon']:.4f}  kl {rec['kl']:.4f}",
              flush=True)

    if remaining > 0:
        train(model, corpus.train, epochs=remaining, on_epoch=on_epoch)
    save_checkpoint(model, cfg["out"])
    if cfg["log"]:
        _write_atomic(cfg["log"], "\n".join(log_lines) + "\n")
    print(f"wrote {cfg['out']} ({model.variant}, epoch {model.epoch})")
    return model


def _select_scenes(corpus, cfg):
    scenes = corpus.split(cfg["split"])
    if cfg.get("scene_ids"):
        try:
            scenes = [corpus.scene(i) for i in cfg["scene_ids"]]
        except KeyError as exc:
            raise UsageError(str(exc)) from exc
    return scenes


def _sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_sample(cfg):
    model = _load_model(cfg["checkpoint"])
    corpus = _load_corpus(cfg["corpus"])
    if model.vocab != corpus.vocab:
        raise UsageError("checkpoint vocabulary does not match the corpus")
    scenes = _select_scenes(corpus, cfg)
    header = {"format": CAND_FORMAT, "version": 1, "variant": model.variant,
              "checkpoint_sha256": _sha256_file(cfg["checkpoint"]), **_provenance(cfg, "sample")}
    if model.prior is None:
        explicit = {k for k in ("n_z", "test_std") if cfg[k] != DEFAULTS["sample"][k]}
        if explicit:
            log.warning("lstm-baseline uses beam search; ignoring %s", ", ".join(sorted(explicit)))
        std = None
    elif cfg["test_std"] == "tune":
        std, scores = tune_test_std(model, corpus.val, tuple(cfg["std_grid"]), cfg["n_z"], cfg["seed"])
        header["std_scores"] = {str(k): v for k, v in scores.items()}
        print(f"tuned test_std={std} (validation oracle B4: "
              + ", ".join(f"{k}: {v:.4f}" for k, v in scores.items()) + ")")
    else:
        std = float(cfg["test_std"])
    header["test_std"] = std
    sets = sample_candidates(model, scenes, cfg["n_z"], std if std is not None else 1.0, cfg["seed"],
                             cfg["beam_width"])
    lines = [_dumps(header)]
    for cs in sets:
        for sent, prov in zip(cs.candidates, cs.provenance):
            lines.append(_dumps({"scene_id": cs.scene_id, "provenance": prov, "tokens": sent}))
    _write_atomic(cfg["out"], "\n".join(lines) + "\n")
    print(f"wrote {cfg['out']}: {len(sets)} scenes, {len(lines) - 1} candidates")
    return sets, header


def read_candidates(path):
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("format") != CAND_FORMAT:
            raise UsageError(f"{path}: not a candidate file")
        grouped = {}
        for line in f:
            if line.strip():
                r = json.loads(line)
                grouped.setdefault(r["scene_id"], ([], []))
                grouped[r["scene_id"]][0].append(r["tokens"])
                grouped[r["scene_id"]][1].append(r["provenance"])
    sets = [CandidateSet(sid, c, p) for sid, (c, p) in sorted(grouped.items())]
    return header, sets


def format_table(rows):
    cols = [f"{m}" for m in METRICS]
    head = f"{'model':<24} {'':>8} " + " ".join(f"{c:>7}" for c in cols) + f" {'unique':>7} {'novel':>7}"
    out = [head, "-" * len(head)]
    for r in rows:
        for kind in ("oracle", "rerank"):
            vals = " ".join(f"{r[f'{kind}_{m}']:7.4f}" for m in METRICS)
            extra = f" {r['unique']:7.4f} {r['novel']:7.4f}" if kind == "oracle" else ""
            out.append(f"{r['model'] if kind == 'oracle' else '':<24} {kind:>8} {vals}{extra}")
    return "\n".join(out) + "\n"


def cmd_eval(cfg):
    corpus = _load_corpus(cfg["corpus"])
    scenes = corpus.split(cfg["split"])
    rows = []
    for path in cfg["candidates"]:
        header, sets = read_candidates(path)
        try:
            row, _ = evaluate_sets(sets, scenes, corpus.train, corpus.K, cfg["m_neighbors"], cfg["top_m"])
        except KeyError as exc:
            raise UsageError(f"{path}: {exc}") from exc
        rows.append({"model": header.get("variant", Path(path).stem), "candidates": str(path),
                     "test_std": header.get("test_std"), **row})
    lines = [_dumps({"format": REPORT_FORMAT, "version": 1, "columns": list(METRICS), **_provenance(cfg, "eval")})]
    lines += [_dumps(r) for r in rows]
    _write_atomic(cfg["out"], "\n".join(lines) + "\n")
    table = format_table(rows)
    if cfg["table"]:
        _write_atomic(cfg["table"], table)
    print(table, end="")
    return rows


def cmd_control(cfg):
    model = _load_model(cfg["checkpoint"])
    corpus = _load_corpus(cfg["corpus"])
    try:
        scene = corpus.scene(cfg["scene_id"])
        add = [category_index(n, corpus.K) for n in cfg["add"]]
        remove = [category_index(n, corpus.K) for n in cfg["remove"]]
        result = control_scene(model, scene, add, remove, cfg["n_z"], cfg["test_std"], cfg["seed"])
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc).strip("'\"")) from exc
    before = list(dict.fromkeys(result["before"].candidates))
    after = list(dict.fromkeys(result["after"].candidates))
    names = [c.name for c in DEFAULT_LEXICON[:corpus.K]]
    width = max([len(s) for s in before] + [len("before: ") + 20])
    print(f"scene {scene.id}: {', '.join(names[k] for k in result['labels_before'])}"
          f"  ->  {', '.join(names[k] for k in result['labels_after'])}")
    print(f"{'before':<{width}}   after")
    for i in range(max(len(before), len(after))):
        left = before[i] if i < len(before) else ""
        right = after[i] if i < len(after) else ""
        print(f"{left:<{width}}   {right}")
    print("noun frequency per candidate:")
    for k in range(corpus.K):
        fb, fa = result["noun_freq_before"][k], result["noun_freq_after"][k]
        if fb or fa:
            print(f"  {names[k]:<8} {fb:6.3f} -> {fa:6.3f}")
    record = {**_provenance(cfg, "control"), "scene_id": scene.id,
              "labels_before": result["labels_before"], "labels_after": result["labels_after"],
              "before": result["before"].candidates, "after": result["after"].candidates,
              "noun_freq_before": result["noun_freq_before"], "noun_freq_after": result["noun_freq_after"]}
    if cfg.get("out"):
        _write_atomic(cfg["out"], _dumps(record) + "\n")
    return record


COMMANDS = {"gen-corpus": cmd_gen_corpus, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval, "control": cmd_control}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.exit(2, f"{parser.prog} {args.command}: error: {exc}\n")
    except TrainingError as exc:
        parser.exit(3, f"{parser.prog} train: training diverged: {exc}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
