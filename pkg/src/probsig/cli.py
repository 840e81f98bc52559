"""Command-line runner: ``probsig <command> --run DIR [options]``.

Every command works inside one run directory, records the effective config
under ``config/<command>.txt`` and lists its outputs in ``manifest.json``.
Relative ``--run`` paths are resolved under ``$PROBSIG_OUT`` when it is set.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as corp
from . import metrics as met
from . import oracle as orc
from . import signatures as sig
from .linalg import LinalgError, cosine_matrix, pca_project, write_matrix_csv
from .model import (NumericError, TrainConfig, config_dict, load_checkpoint, save_checkpoint, train,
                    train_bigram_lm)
from .report import (MANIFEST, RunError, Timer, format_config, heatmap_svg, line_svg, load_manifest,
                     parse_config, run_lock, sha256_file, update_manifest)
from .taskgen import Dataset, TaskError, TaskSpec, Vocabulary, generate_dataset

log = logging.getLogger("probsig")

OUT_ENV = "PROBSIG_OUT"
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# -- helpers -----------------------------------------------------------------------------

def _run_dir(arg: str) -> Path:
    p = Path(arg)
    root = os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _int_list(text: str) -> tuple[int, ...]:
    """``"11-20"`` or ``"1,2,5"`` (ranges inclusive)."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            out.extend(range(int(lo), int(hi) + 1) if sep else [int(part)])
        except ValueError:
            raise UsageError(f"cannot parse integer list {text!r}") from None
    return tuple(out)


def _merge(args, section: str, keys: dict[str, object]) -> dict[str, str]:
    """Config file values for ``section``, overridden by flags that were given."""
    cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file {path} does not exist")
        try:
            cfg = parse_config(path.read_text())
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    merged = {}
    for key, default in keys.items():
        flag = getattr(args, key, None)
        full = f"{section}.{key}"
        if flag is not None:
            merged[full] = str(flag)
        elif full in cfg:
            merged[full] = cfg[full]
        elif default is not None:
            merged[full] = str(default)
    return merged


def _get(cfg: dict, key: str, cast=str):
    value = cfg.get(key)
    if value is None:
        return None
    if cast is bool:
        return value.lower() in ("1", "true", "yes", "on")
    try:
        return cast(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None


def _persist_config(run: Path, command: str, cfg: dict) -> Path:
    path = run / "config" / f"{command}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(cfg))
    return path


def _write(path: Path, text: str, written: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    written.append(path)


def _load_task(run: Path) -> tuple[Dataset, Path]:
    """Dataset of ``run`` or of the run it was trained from."""
    src = run
    prov = run / "provenance.json"
    if not (run / "dataset.csv").exists() and prov.exists():
        src = Path(json.loads(prov.read_text()).get("data", run))
    data = src / "dataset.csv"
    if not data.exists():
        raise DataError(f"no dataset.csv in {src} (run gen-task first)")
    spec = None
    if (src / "task.json").exists():
        spec = TaskSpec.from_dict(json.loads((src / "task.json").read_text()))
    ds = Dataset.load(data, spec)
    if (src / "vocab.json").exists():
        ds.vocab = Vocabulary.from_json((src / "vocab.json").read_text())
    return ds, src


def _checkpoints(run: Path) -> dict[int, Path]:
    d = run / "checkpoints"
    if not d.exists():
        raise DataError(f"no checkpoints in {run} (run train first)")
    out = {}
    for f in d.glob("epoch_*.ckpt"):
        out[int(f.stem.split("_")[1])] = f
    if not out:
        raise DataError(f"no checkpoints in {d}")
    return dict(sorted(out.items()))


def _pick_epoch(ckpts: dict[int, Path], epoch: str | None) -> int:
    if epoch in (None, "final", "last"):
        return max(ckpts)
    e = int(epoch)
    if e not in ckpts:
        raise DataError(f"no checkpoint for epoch {e}; available: {sorted(ckpts)[:10]}...")
    return e


def _check_vocab(params, vocab_size: int, run: Path, data_dir: Path, ckpt: Path) -> None:
    if params.d_vob != vocab_size:
        raise DataError(f"checkpoint {ckpt} (manifest {run / MANIFEST}) has d_vob={params.d_vob} but the data "
                        f"(manifest {data_dir / MANIFEST}) has {vocab_size} tokens")


def _bigrams(run: Path) -> corp.BigramCounts:
    path = run / "corpus" / "bigrams.csv"
    if not path.exists():
        raise DataError(f"no bigram table in {run} (run corpus-sig first)")
    lines = path.read_text().splitlines()[1:]
    meta = json.loads((run / "corpus" / "meta.json").read_text())
    counts = corp.BigramCounts(d_vob=int(meta["d_vob"]))
    for line in lines:
        s, t, c = line.split(",")
        counts.pairs[(int(s), int(t))] = int(c)
    return counts


# -- commands ------------------------------------------------------------------------

def cmd_gen_task(args) -> list[Path]:
    run = args.run_dir
    cfg = _merge(args, "task", {"task": "add", "seed": 0, "n": 50000, "anchors": "11-20", "keys": "101-140",
                                 "labels": None})
    out = run / "dataset.csv"
    if out.exists() and not args.force:
        raise UsageError(f"{out} already exists (use --force to overwrite)")
    labels = _get(cfg, "task.labels")
    spec = TaskSpec(cfg["task.task"], _int_list(cfg["task.anchors"]), _int_list(cfg["task.keys"]),
                    _int_list(labels) if labels else None, _get(cfg, "task.n", int), _get(cfg, "task.seed", int))
    ds = generate_dataset(spec)
    written = []
    _write(out, ds.to_csv(), written)
    _write(run / "vocab.json", ds.vocab.to_json(), written)
    _write(run / "task.json", json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n", written)
    written.append(_persist_config(run, "gen-task", cfg))
    print(f"wrote {len(ds)} samples, vocabulary of {len(ds.vocab)} tokens")
    return written, cfg


def cmd_gen_corpus(args) -> list[Path]:
    run = args.run_dir
    cfg = _merge(args, "corpus", {"states": 10, "tokens": 1000000, "seq_len": 1000, "structure": "banded",
                                   "width": 1.0, "noise": 0.2, "seed": 0, "format": "text-int"})
    n = _get(cfg, "corpus.states", int)
    seed = _get(cfg, "corpus.seed", int)
    structure = cfg["corpus.structure"]
    if structure == "banded":
        trans = corp.banded_transition(n, _get(cfg, "corpus.width", float), _get(cfg, "corpus.noise", float), seed)
    elif structure == "dirichlet":
        trans = corp.random_transition(n, seed=seed)
    elif structure == "clustered":
        trans = corp.clustered_transition(n, seed=seed)
    else:
        raise UsageError(f"unknown corpus structure {structure!r}")
    seq_len = _get(cfg, "corpus.seq_len", int)
    n_seq = max(1, _get(cfg, "corpus.tokens", int) // seq_len)
    stream = corp.generate_markov(corp.MarkovSpec(trans, seq_len=seq_len, n_sequences=n_seq, seed=seed))
    written = []
    flat = np.concatenate(stream.sequences)
    if cfg["corpus.format"] == "binary-u32":
        path = run / "corpus.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        corp.write_binary(path, flat)
        written.append(path)
    else:
        _write(run / "corpus.txt", "\n".join(" ".join(map(str, s.tolist())) for s in stream.sequences) + "\n", written)
    path = run / "transition.csv"
    write_matrix_csv(path, trans, list(range(n)), list(range(n)))
    written.append(path)
    written.append(_persist_config(run, "gen-corpus", cfg))
    print(f"wrote {flat.size} tokens in {len(stream)} sequences")
    return written, cfg


def _corpus_path(run: Path, given: str | None) -> tuple[Path, str]:
    if given:
        p = Path(given)
        fmt = "binary-u32" if p.suffix == ".bin" else "text-int"
    elif (run / "corpus.txt").exists():
        p, fmt = run / "corpus.txt", "text-int"
    elif (run / "corpus.bin").exists():
        p, fmt = run / "corpus.bin", "binary-u32"
    else:
        raise DataError(f"no corpus in {run}; pass --corpus")
    if not p.exists():
        raise DataError(f"corpus file {p} does not exist")
    return p, fmt


def _load_stream(path: Path, fmt: str, seq_len: int | None) -> corp.TokenStream:
    """Text corpora without ``seq_len`` keep one sequence per line."""
    if fmt != "text-int" or seq_len is not None:
        return corp.ingest(path, fmt, seq_len or 2048)
    seqs = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        toks = line.split()
        bad = [t for t in toks if not t.isdigit()]
        if bad:
            raise corp.CorpusError(f"{path}: malformed token {bad[0][:20]!r} on line {n}")
        if toks:
            seqs.append(np.array([int(t) for t in toks], dtype=np.int64))
    if not seqs:
        raise corp.CorpusError(f"{path}: empty corpus")
    return corp.TokenStream(seqs)


LM_DEFAULTS = {"epochs": 100, "lr": 1e-3, "init_exponent": 1.2, "snapshot_epochs": "1,2,5,50"}


def cmd_train(args):
    run = args.run_dir
    keys = {"arch": "lin", "activation": None, "epochs": 1000, "lr": 1e-5, "d": 200, "batch_size": 100,
            "weight_decay": 0.01, "init_exponent": 0.8, "seed": 0, "snapshot_epochs": "1,2,5,120",
            "snapshot_every": 10, "lm_init": None, "tied": False, "cosine_schedule": False,
            "corpus": None, "seq_len": None, "data": None}
    cfg = _merge(args, "model", keys)
    lm = cfg.get("model.corpus") is not None or args.lm
    if lm:  # bigram LMs get their own calibrated defaults
        cfg = _merge(args, "model", {**keys, **LM_DEFAULTS})
    arch = cfg["model.arch"]
    if arch not in ("lin", "ffn"):
        raise UsageError(f"unknown architecture {arch!r}")
    act = cfg.get("model.activation") or ("identity" if arch == "lin" else "relu")
    if arch == "lin" and act != "identity":
        raise UsageError("the linear model uses the identity activation")
    if arch == "ffn" and act not in ("relu", "quadratic"):
        raise UsageError(f"unsupported activation {act!r} for ffn")
    lm_init = _get(cfg, "model.lm_init", bool) if "model.lm_init" in cfg else False
    tcfg = TrainConfig(d=_get(cfg, "model.d", int), init_exponent=_get(cfg, "model.init_exponent", float),
                       lr=_get(cfg, "model.lr", float), batch_size=_get(cfg, "model.batch_size", int),
                       epochs=_get(cfg, "model.epochs", int), weight_decay=_get(cfg, "model.weight_decay", float),
                       seed=_get(cfg, "model.seed", int), snapshot_every=_get(cfg, "model.snapshot_every", int),
                       snapshot_epochs=_int_list(cfg["model.snapshot_epochs"]), lm_init=lm_init,
                       cosine_schedule=_get(cfg, "model.cosine_schedule", bool))
    written = []
    if lm:
        path, fmt = _corpus_path(run, cfg.get("model.corpus"))
        stream = _load_stream(path, fmt, _get(cfg, "model.seq_len", int))
        result = train_bigram_lm(stream, tcfg, tied=_get(cfg, "model.tied", bool))
        data_dir = run
        meta = {"mode": "bigram-lm", "corpus": str(path), "corpus_sha256": sha256_file(path)}
    else:
        if cfg.get("model.data"):
            data_run = Path(cfg["model.data"])
            ds, data_dir = _load_task(data_run)
            if data_dir.resolve() != run.resolve():
                _write(run / "provenance.json", json.dumps({"data": str(data_dir)}, sort_keys=True) + "\n", written)
        else:
            ds, data_dir = _load_task(run)
        result = train(ds, tcfg, act)
        meta = {"mode": "addition", "task": ds.spec.kind.value,
                "data_sha256": sha256_file(data_dir / "dataset.csv")}
    meta.update({"arch": arch, "config": config_dict(tcfg)})
    ck = run / "checkpoints"
    if ck.exists():
        shutil.rmtree(ck)
    ck.mkdir(parents=True)
    for epoch, params in sorted(result.snapshots.items()):
        path = ck / f"epoch_{epoch:05d}.ckpt"
        save_checkpoint(path, params, {**meta, "epoch": epoch})
        written.append(path)
    result.write_timeline(run / "timeline.jsonl")
    written.append(run / "timeline.jsonl")
    written.append(_persist_config(run, "train", cfg))
    final = result.timeline[-1] if result.timeline else {}
    label = "bigram LM" if lm else f"{arch}/{act}"
    print(f"trained {label}: {len(result.snapshots)} snapshots, final accuracy "
          f"{final.get('final_accuracy', float('nan')):.4f}")
    return written, cfg


def cmd_signatures(args):
    run = args.run_dir
    cfg = _merge(args, "signatures", {"which": "all", "source": "both"})
    ds, _ = _load_task(run)
    spec = ds.spec
    which = ["phi_y", "phi_X", "phi_X_given_y", "varphi_X"] if cfg["signatures.which"] == "all" \
        else [cfg["signatures.which"]]
    sources = ["analytic", "empirical"] if cfg["signatures.source"] == "both" else [cfg["signatures.source"]]
    model = sig._TaskModel(spec)
    mem = sig.membership(ds)
    written, l1_rows = [], ["signature,index,l1"]
    out = run / "signatures"
    for w in which:
        if w not in ("phi_y", "phi_X", "phi_X_given_y", "varphi_X"):
            raise UsageError(f"unknown signature {w!r}")
        indices = spec.label_domain if w == "varphi_X" else spec.anchors
        mats = {}
        for src in sources:
            cols = []
            for i in indices:
                if src == "analytic":
                    v = sig.align_to(getattr(model, w)(i), model.vocab, ds.vocab)
                else:
                    try:
                        v = sig.empirical_signature(ds, w, i, mem)
                    except sig.SignatureError:  # index never observed
                        v = np.zeros((len(ds.vocab),) * (2 if w == "phi_X_given_y" else 1))
                cols.append(v)
            mats[src] = np.stack(cols)
            flat = mats[src].reshape(len(indices), -1)
            if w == "phi_X_given_y":
                for i, m in zip(indices, mats[src]):
                    path = out / f"{w}_{src}_{i}.csv"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    write_matrix_csv(path, m, ds.vocab.raw_tokens, ds.vocab.raw_tokens)
                    written.append(path)
            else:
                path = out / f"{w}_{src}.csv"
                path.parent.mkdir(parents=True, exist_ok=True)
                write_matrix_csv(path, flat, list(indices), ds.vocab.raw_tokens)
                written.append(path)
            nonzero = np.linalg.norm(flat, axis=1) > 0
            if nonzero.sum() >= 2:
                keep = [i for i, k in zip(indices, nonzero) if k]
                cos = cosine_matrix(flat[nonzero].T)
                _write(out / f"cos_{w}_{src}.svg", heatmap_svg(cos, keep, keep, f"cos {w} ({src})"), written)
        if len(mats) == 2:
            diff = np.abs(mats["analytic"] - mats["empirical"]).reshape(len(indices), -1)
            if w == "phi_X_given_y":
                diff = np.abs(mats["analytic"] - mats["empirical"]).sum(axis=2).max(axis=1)
                l1_rows += [f"{w},{i},{d:.12g}" for i, d in zip(indices, diff)]
            else:
                l1_rows += [f"{w},{i},{d:.12g}" for i, d in zip(indices, diff.sum(axis=1))]
    if len(sources) == 2:
        _write(out / "l1.csv", "\n".join(l1_rows) + "\n", written)
    written.append(_persist_config(run, "signatures", cfg))
    print(f"wrote {len(written) - 1} signature artifacts")
    return written, cfg


def _label_structure(params, ds) -> tuple[np.ndarray, np.ndarray, list[int]]:
    spec = ds.spec
    labels = [nu for nu in spec.label_domain if nu in ds.vocab]
    ids = [ds.vocab.to_id(nu) for nu in labels]
    cos_u = cosine_matrix(params.W_U[ids].T)
    model = sig._TaskModel(spec)
    phi = np.stack([model.varphi_X(nu) for nu in labels], axis=1)
    return cos_u, cosine_matrix(phi), labels


def cmd_metrics(args):
    run = args.run_dir
    cfg = _merge(args, "metrics", {"r_order": None, "unemb": None, "pca": None})
    want_all = not any(cfg.get(f"metrics.{k}") for k in ("r_order", "unemb", "pca"))
    ds, data_dir = _load_task(run)
    ckpts = _checkpoints(run)
    anchors = list(ds.spec.anchors)
    a_ids = [ds.vocab.to_id(a) for a in anchors]
    written = []
    out = run / "metrics"
    final_e = max(ckpts)
    final, _ = load_checkpoint(ckpts[final_e])
    _check_vocab(final, len(ds.vocab), run, data_dir, ckpts[final_e])
    if want_all or cfg.get("metrics.r_order"):
        snaps = {e: load_checkpoint(p)[0].W_E for e, p in ckpts.items()}
        if len(snaps) >= 2:
            tl = met.structure_timeline(snaps, a_ids, anchors)
            _write(out / "structure_timeline.csv", met.timeline_csv(tl), written)
            _write(out / "structure_timeline.svg",
                   line_svg([p.epoch for p in tl], {"R_order": [p.r_order for p in tl],
                                                   "mean cos": [p.mean_cos for p in tl]},
                            "anchor structure over training"), written)
        cos_a = cosine_matrix(final.W_E[:, a_ids])
        _write(out / "cos_WE_anchors.svg", heatmap_svg(cos_a, anchors, anchors, f"cos W_E anchors, epoch {final_e}"),
               written)
    if want_all or cfg.get("metrics.unemb"):
        cos_u, cos_phi, labels = _label_structure(final, ds)
        summary = {"epoch": final_e, "pearson_unemb_varphi": met.r_cos(cos_u, cos_phi)}
        if ds.spec.kind.value == "mod":
            summary["ring"] = met.ring_diagnostic(cos_u, labels)
        _write(out / "unembedding.json", json.dumps(summary, indent=1, sort_keys=True) + "\n", written)
        _write(out / "cos_WU_labels.svg", heatmap_svg(cos_u, labels, labels, f"cos W_U labels, epoch {final_e}"),
               written)
        _write(out / "cos_varphi_labels.svg", heatmap_svg(cos_phi, labels, labels, "cos varphi_X (analytic)"),
               written)
    if want_all or cfg.get("metrics.pca"):
        proj = pca_project(final.W_E[:, a_ids], 2)
        rows = ["anchor,pc1,pc2"] + [f"{a},{x:.12g},{y:.12g}" for a, x, y in zip(anchors, proj[0], proj[1])]
        _write(out / "pca_anchors.csv", "\n".join(rows) + "\n", written)
    written.append(_persist_config(run, "metrics", cfg))
    print(f"wrote {len(written) - 1} metric artifacts")
    return written, cfg


def cmd_oracle(args):
    run = args.run_dir
    cfg = _merge(args, "oracle", {"basis": "cor1", "sign": "main", "epoch": "0", "order": 2})
    basis, order = cfg["oracle.basis"], _get(cfg, "oracle.order", int)
    signs = ["main", "appendix"] if cfg["oracle.sign"] == "both" else [cfg["oracle.sign"]]
    ckpts = _checkpoints(run)
    epoch = _pick_epoch(ckpts, cfg["oracle.epoch"])
    params, header = load_checkpoint(ckpts[epoch])
    written = []
    out = run / "oracle"
    reports = {}
    if basis == "cor4":
        counts = _bigrams(run)
        if params.d_vob != counts.d_vob:
            raise DataError(f"checkpoint {ckpts[epoch]} (manifest {run / MANIFEST}) has d_vob={params.d_vob} but "
                            f"the bigram table (manifest {run / MANIFEST}) has {counts.d_vob}")
        pair = counts.dense()
        meas = orc.lm_measured_gradients(params, pair)
        total = pair.sum()
        pi, ro = pair.sum(axis=1) / total, pair.sum(axis=0) / total
        rows = {"emb": [], "unemb": [], "tied": []}
        for s in range(params.d_vob):
            if pi[s] == 0 or ro[s] == 0:
                continue
            pr = orc.predict_lm(params, sig.corpus_phi_next(counts, s), sig.corpus_varphi_pre(counts, s), pi[s], ro[s],
                                s, pi, params.tied, order, token=s)
            if params.tied:
                rows["tied"].append(orc.compare(pr["tied"], meas["W_E"][:, s]))
            else:
                rows["emb"].append(orc.compare(pr["emb"], meas["W_E"][:, s]))
                rows["unemb"].append(orc.compare(pr["unemb"], meas["W_U"][s]))
        reports = {f"cor4_{k}": v for k, v in rows.items() if v}
    else:
        ds, data_dir = _load_task(run)
        _check_vocab(params, len(ds.vocab), run, data_dir, ckpts[epoch])
        ts = orc.TaskSignatures(ds.spec, ds.vocab)
        meas = orc.measured_gradients(params, ds)
        if basis == "cor1":
            for sign in signs:
                reports[f"cor1_{sign}"] = [
                    orc.compare(orc.predict_emb_linear(params, ts.phi_y(a), ts.phi_X(a), ts.r_in(a), sign, order,
                                                       ds.vocab.to_id(a), a), meas["W_E"][:, ds.vocab.to_id(a)])
                    for a in ds.spec.anchors]
        elif basis == "cor2":
            reports["cor2"] = [
                orc.compare(orc.predict_emb_ffn(params, ts.phi_X_given_y(a), ts.r_joint(a), ts.phi_y(a), ts.phi_X(a),
                                                ts.r_in(a), ds.vocab.to_id(a), True, order, a),
                            meas["W_E"][:, ds.vocab.to_id(a)])
                for a in ds.spec.anchors]
        elif basis == "cor3":
            incl, co = ts.inclusion(), ts.co_inclusion()
            reports["cor3"] = [
                orc.compare(orc.predict_unemb_linear(params, ts.varphi_X(nu), ts.r_out(nu), 3, incl, co, order,
                                                     ds.vocab.to_id(nu), nu), meas["W_U"][ds.vocab.to_id(nu)])
                for nu in ds.spec.label_domain]
        elif basis in ("prop1", "prop2"):
            rows = []
            toks = ds.spec.anchors if basis == "prop1" else ds.spec.label_domain
            for t in toks:
                i = ds.vocab.to_id(t)
                if basis == "prop1":
                    dec, m = orc.exact_grad_decomposition_emb(params, ds, t), meas["W_E"][:, i]
                else:
                    dec, m = orc.exact_grad_decomposition_unemb(params, ds, t), meas["W_U"][i]
                rep = orc.compare(dec.total(), m)
                rep.token, rep.basis = t, basis
                rows.append(rep)
            reports[basis] = rows
        else:
            raise UsageError(f"unknown basis {basis!r}")
    summary = {}
    for name, reps in reports.items():
        _write(out / f"{name}_epoch{epoch}.jsonl", "".join(r.to_json() + "\n" for r in reps), written)
        cs = [r.cosine for r in reps]
        summary[name] = {"epoch": epoch, "order": order, "n": len(cs), "min_cosine": min(cs),
                         "mean_cosine": float(np.mean(cs))}
        print(f"{name}: min cosine {min(cs):.4f}, mean {np.mean(cs):.4f} over {len(cs)} targets")
    _write(out / f"summary_{basis}_epoch{epoch}.json", json.dumps(summary, indent=1, sort_keys=True) + "\n", written)
    written.append(_persist_config(run, "oracle", cfg))
    return written, cfg


def cmd_corpus_sig(args):
    run = args.run_dir
    cfg = _merge(args, "corpus_sig", {"corpus": None, "seq_len": None, "top": 200})
    path, fmt = _corpus_path(run, cfg.get("corpus_sig.corpus"))
    stream = _load_stream(path, fmt, _get(cfg, "corpus_sig.seq_len", int))
    counts = corp.count_bigrams(stream)
    tokens, short = corp.top_frequent(stream, _get(cfg, "corpus_sig.top", int))
    written = []
    out = run / "corpus"
    _write(out / "bigrams.csv", counts.to_csv(), written)
    meta = {"d_vob": counts.d_vob, "tokens": stream.n_tokens, "sequences": len(stream), "dropped": stream.dropped,
            "top": tokens, "fewer_than_requested": short, "corpus_sha256": sha256_file(path)}
    _write(out / "meta.json", json.dumps(meta, indent=1, sort_keys=True) + "\n", written)
    for which in ("next", "pre", "tilde"):
        m = sig.corpus_signature_matrix(counts, which, tokens)
        p = out / f"phi_{which}.csv"
        write_matrix_csv(p, m.T, tokens, list(range(counts.d_vob)))
        written.append(p)
        _write(out / f"cos_phi_{which}.svg", heatmap_svg(cosine_matrix(m), tokens, tokens, f"cos phi_{which}"), written)
    written.append(_persist_config(run, "corpus-sig", cfg))
    print(f"{stream.n_tokens} tokens, {counts.total} bigrams, {len(tokens)} frequent tokens")
    return written, cfg


def cmd_align(args):
    run = args.run_dir
    cfg = _merge(args, "align", {"which": "next", "epoch": "final"})
    counts = _bigrams(run)
    meta = json.loads((run / "corpus" / "meta.json").read_text())
    tokens = meta["top"]
    ckpts = _checkpoints(run)
    epoch = _pick_epoch(ckpts, cfg["align.epoch"])
    params, _ = load_checkpoint(ckpts[epoch])
    if params.d_vob != counts.d_vob:
        raise DataError(f"checkpoint {ckpts[epoch]} (manifest {run / MANIFEST}) has d_vob={params.d_vob} but the "
                        f"bigram table (manifest {run / MANIFEST}) has {counts.d_vob}")
    which = cfg["align.which"]
    sig_m = sig.corpus_signature_matrix(counts, which, tokens)
    emb = params.W_U[tokens].T if which == "pre" else params.W_E[:, tokens]
    cos_e, cos_s = cosine_matrix(emb), cosine_matrix(sig_m)
    curve = met.percentile_alignment(cos_e, cos_s)
    written = []
    out = run / "align"
    _write(out / f"deciles_{which}.csv", curve.to_csv(), written)
    rows = ["token,R_D,mean_similarity"]
    for k, s in enumerate(tokens):
        try:
            r, m = met.per_token_alignment(cos_e, cos_s, k)
            rows.append(f"{s},{r:.12g},{m:.12g}")
        except met.MetricError:
            rows.append(f"{s},,")
    _write(out / f"per_token_{which}.csv", "\n".join(rows) + "\n", written)
    summary = {"epoch": epoch, "which": which, "r_cos": met.r_cos(cos_e, cos_s), "decile_means": curve.mean}
    _write(out / f"summary_{which}.json", json.dumps(summary, indent=1, sort_keys=True) + "\n", written)
    _write(out / f"cos_emb_{which}.svg", heatmap_svg(cos_e, tokens, tokens, f"cos embedding, epoch {epoch}"), written)
    _write(out / f"cos_sig_{which}.svg", heatmap_svg(cos_s, tokens, tokens, f"cos phi_{which}"), written)
    _write(out / f"deciles_{which}.svg", line_svg(curve.decile, {"mean p_sig": curve.mean}, "percentile alignment"),
           written)
    written.append(_persist_config(run, "align", cfg))
    print(f"R_cos = {summary['r_cos']:.4f}")
    return written, cfg


def cmd_report(args):
    run = args.run_dir
    man_path = run / MANIFEST
    if not man_path.exists():
        raise DataError(f"no manifest in {run}")
    man = load_manifest(run)
    out = run / "report"
    if out.exists():
        shutil.rmtree(out)
    out.mkdir()
    missing, changed, figures, tables = [], [], [], []
    for rel, digest in sorted(man["files"].items()):
        f = run / rel
        if rel.startswith("report/"):
            continue
        if not f.exists():
            missing.append(rel)
            continue
        if sha256_file(f) != digest:
            changed.append(rel)
        if f.suffix == ".svg":
            dest = out / rel.replace("/", "__")
            shutil.copyfile(f, dest)
            figures.append((rel, dest.name))
        elif f.suffix in (".json",) and ("summary" in f.name or f.name == "unembedding.json"):
            tables.append((rel, json.loads(f.read_text())))
        elif f.name == "structure_timeline.csv":
            tables.append((rel, f.read_text()))
    lines = [f"# Run report: {run.name}", "", f"tool version {man.get('tool_version')}", "",
             "## Commands", ""]
    for cmd, info in sorted(man.get("commands", {}).items()):
        lines.append(f"- {cmd}: config {info.get('config_hash')}")
    lines += ["", "## Figures", ""]
    lines += [f"- {rel}: {name}" for rel, name in figures] or ["(none)"]
    lines += ["", "## Tables", ""]
    for rel, content in tables:
        lines.append(f"### {rel}")
        lines.append("")
        lines.append(content.rstrip() if isinstance(content, str) else json.dumps(content, indent=1, sort_keys=True))
        lines.append("")
    if missing or changed:
        lines += ["## Warnings", ""]
        lines += [f"- missing artifact: {m}" for m in missing]
        lines += [f"- artifact changed since it was recorded: {c}" for c in changed]
        lines.append("")
    (out / "index.md").write_text("\n".join(lines) + "\n")
    print(f"report with {len(figures)} figures; {len(missing)} missing artifacts")
    for m in missing:
        log.warning("missing artifact %s", m)
    return [], {"report.run": str(run)}


COMMANDS = {"gen-task": cmd_gen_task, "gen-corpus": cmd_gen_corpus, "train": cmd_train,
            "signatures": cmd_signatures, "metrics": cmd_metrics, "oracle": cmd_oracle,
            "corpus-sig": cmd_corpus_sig, "align": cmd_align, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="probsig", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"probsig {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--run", required=True, help=f"run directory (relative paths go under ${OUT_ENV})")
        sp.add_argument("--config", help="flat section.key=value file; flags win")
        return sp

    sp = add("gen-task", "sample an addition dataset")
    sp.add_argument("--task", choices=["add", "add_same", "mod"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--anchors", help="e.g. 11-20")
    sp.add_argument("--keys", help="e.g. 101-140")
    sp.add_argument("--labels", help="label domain Y for add_same")
    sp.add_argument("--force", action="store_true")

    sp = add("gen-corpus", "sample a Markov token corpus")
    sp.add_argument("--states", type=int)
    sp.add_argument("--tokens", type=int)
    sp.add_argument("--seq-len", dest="seq_len", type=int)
    sp.add_argument("--structure", choices=["banded", "dirichlet", "clustered"])
    sp.add_argument("--width", type=float, help="banded: bump width in states")
    sp.add_argument("--noise", type=float, help="banded: weight of the random part")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--format", choices=["text-int", "binary-u32"])

    sp = add("train", "train F_lin / F_ffn, or a bigram LM with --lm / --corpus")
    sp.add_argument("--arch", choices=["lin", "ffn"])
    sp.add_argument("--activation", choices=["identity", "relu", "quadratic"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--d", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--weight-decay", dest="weight_decay", type=float)
    sp.add_argument("--init-exponent", dest="init_exponent", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--snapshot-epochs", dest="snapshot_epochs")
    sp.add_argument("--snapshot-every", dest="snapshot_every", type=int)
    sp.add_argument("--lm-init", dest="lm_init", action="store_const", const=True)
    sp.add_argument("--tied", action="store_const", const=True)
    sp.add_argument("--cosine-schedule", dest="cosine_schedule", action="store_const", const=True)
    sp.add_argument("--data", help="run directory holding dataset.csv (default: --run)")
    sp.add_argument("--corpus", help="token corpus file (implies --lm)")
    sp.add_argument("--seq-len", dest="seq_len", type=int)
    sp.add_argument("--lm", action="store_true", help="bigram LM on the run's corpus")

    sp = add("signatures", "analytic and empirical signatures")
    sp.add_argument("--which", choices=["all", "phi_y", "phi_X", "phi_X_given_y", "varphi_X"])
    sp.add_argument("--source", choices=["both", "analytic", "empirical"])

    sp = add("metrics", "structure metrics of the trained snapshots")
    sp.add_argument("--r-order", dest="r_order", action="store_const", const=True)
    sp.add_argument("--unemb", action="store_const", const=True)
    sp.add_argument("--pca", action="store_const", const=True)

    sp = add("oracle", "compare gradient predictions with measured gradients")
    sp.add_argument("--basis", choices=["prop1", "prop2", "cor1", "cor2", "cor3", "cor4"])
    sp.add_argument("--sign", choices=["main", "appendix", "both"])
    sp.add_argument("--epoch")
    sp.add_argument("--order", type=int, choices=[0, 1, 2])

    sp = add("corpus-sig", "bigram counts and next/previous-token signatures")
    sp.add_argument("--corpus")
    sp.add_argument("--seq-len", dest="seq_len", type=int)
    sp.add_argument("--top", type=int)

    sp = add("align", "embedding vs signature similarity alignment")
    sp.add_argument("--which", choices=["next", "pre", "tilde"])
    sp.add_argument("--epoch")

    add("report", "collate a run directory into report/index.md")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.run_dir = _run_dir(args.run)
    fn = COMMANDS[args.command]
    try:
        with run_lock(args.run_dir), Timer() as timer:
            written, cfg = fn(args)
        if args.command != "report":
            update_manifest(args.run_dir, args.command, cfg, written, timer.seconds)
    except UsageError as exc:
        print(f"probsig {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"probsig {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, RunError, TaskError, corp.CorpusError, sig.SignatureError, orc.OracleError,
            met.MetricError, LinalgError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"probsig {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
