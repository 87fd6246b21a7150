"""Experiment configuration, training loop, evaluation and sweeps."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import optim
from . import tensor as T
from .clustering import kmeans_best_of
from .contrastive import ContrastiveConfig, QueueBank, distance_diagnostics, enqueue_batch, total_loss
from .data import (Corpus, SyntheticSpec, Vocab, batches, build_vocab, collate, generate_synthetic,
                   load_corpus, tokenize)
from .encoder import (EncoderConfig, EncoderParams, encode, init_params, load_checkpoint, momentum_update,
                      save_checkpoint)
from .metrics import adjusted_rand_index, clustering_accuracy, normalized_mutual_info

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment configuration; JSON keys are exactly these field names."""

    # data: synthetic unless data_path is set
    data_path: str | None = None
    num_coarse: int = 4
    fine_per_coarse: int = 3
    train_per_fine: int = 50
    test_per_fine: int = 20
    doc_len: int = 16
    coarse_pool: int = 20
    fine_pool: int = 5
    noise_pool: int = 200
    p_coarse: float = 0.4
    p_fine: float = 0.4
    p_noise: float = 0.2
    fine_sharing: float = 0.0
    min_freq: int = 1
    # encoder
    num_layers: int = 4
    tap_layer: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    dropout_p: float = 0.1
    max_seq_len: int = 32
    precision: str = "float64"
    # objective
    tau: float = 0.1
    alpha_same: float = 1.0
    alpha_diff: float = 1.4
    alpha_m: float = 1.0
    gamma1: float = 0.001
    gamma2: float = 0.008
    momentum: float = 0.9
    queue_capacity: int = 128
    use_momentum: bool = True
    use_weighting: bool = True
    use_self_contrast: bool = True
    use_shallow_ce: bool = True
    add_positive_to_denominator: bool = False
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    # schedule and evaluation
    epochs: int = 3
    batch_size: int = 32
    k: int | None = None
    kmeans_restarts: int = 10
    kmeans_max_iters: int = 300
    kmeans_tol: float = 1e-6
    kmeans_normalize: bool = False
    probe_epochs: tuple[int, ...] | None = None
    seed_model: int = 0
    seed_data: int = 0
    seed_kmeans: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be positive")
        if self.probe_epochs is not None:
            object.__setattr__(self, "probe_epochs", tuple(int(e) for e in self.probe_epochs))
        # constructing the sub-configs validates them
        self.contrastive()
        self.optim()
        if self.data_path is None:
            self.synthetic_spec()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["probe_epochs"] is not None:
            d["probe_epochs"] = list(d["probe_epochs"])
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.num_coarse, self.fine_per_coarse, self.train_per_fine, self.test_per_fine,
                             self.doc_len, self.coarse_pool, self.fine_pool, self.noise_pool,
                             self.p_coarse, self.p_fine, self.p_noise, self.fine_sharing, self.seed_data)

    def encoder(self, vocab_size: int, num_coarse: int) -> EncoderConfig:
        return EncoderConfig(vocab_size, self.max_seq_len, self.num_layers, self.tap_layer, self.hidden_dim,
                             self.num_heads, self.ffn_dim, self.dropout_p, num_coarse, self.precision)

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.tau, self.alpha_same, self.alpha_diff, self.alpha_m, self.gamma1,
                                 self.gamma2, self.momentum, self.queue_capacity, self.use_momentum,
                                 self.use_weighting, self.use_self_contrast, self.use_shallow_ce,
                                 self.add_positive_to_denominator)

    def optim(self) -> optim.OptimConfig:
        return optim.OptimConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.clip_norm)

    def probes(self) -> set[int]:
        if self.probe_epochs is not None:
            return set(self.probe_epochs)
        return {0, self.epochs // 2, self.epochs}


def coarse_only(cfg: ExperimentConfig) -> ExperimentConfig:
    """The coarse-supervised baseline: output-layer cross entropy alone."""
    return replace(cfg, gamma2=0.0, use_shallow_ce=False)


@dataclass
class RunReport:
    config_hash: str
    seeds: dict[str, int]
    epochs: list[dict] = field(default_factory=list)
    probes: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def numbers(self) -> dict:
        """Every reported number except wall-clock timings."""
        epochs = [{k: v for k, v in e.items() if k != "seconds"} for e in self.epochs]
        return {"epochs": epochs, "probes": self.probes, "final": self.final}


class TrainingError(RuntimeError):
    pass


def load_data(cfg: ExperimentConfig) -> Corpus:
    if cfg.data_path is not None:
        return load_corpus(cfg.data_path, seed=cfg.seed_data)
    return generate_synthetic(cfg.synthetic_spec())


def prepare(cfg: ExperimentConfig, corpus: Corpus | None = None) -> tuple[Corpus, Vocab]:
    corpus = load_data(cfg) if corpus is None else corpus
    vocab = build_vocab(corpus, cfg.min_freq)
    return tokenize(corpus, vocab, cfg.max_seq_len), vocab


def encode_split(params: EncoderParams, corpus: Corpus, split: str = "test", batch_size: int = 64):
    """Eval-mode features for every document in ``split``, in corpus order."""
    docs = corpus.split(split)
    shallow, deep, logits = [], [], []
    for start in range(0, len(docs), batch_size):
        b = collate(docs[start : start + batch_size])
        f = encode(params, b.tokens, b.mask, mode="eval")
        shallow.append(f.shallow.data)
        deep.append(f.deep.data)
        logits.append(f.out_logits.data)
    return np.concatenate(shallow), np.concatenate(deep), np.concatenate(logits)


def evaluate_features(deep: np.ndarray, logits: np.ndarray, docs, cfg: ExperimentConfig, k: int) -> dict:
    coarse = np.array([d.coarse for d in docs])
    out = {"coarse_acc": float((logits.argmax(axis=1) == coarse).mean())}
    if any(d.fine is None for d in docs):
        return out
    fine = np.array([d.fine for d in docs])
    km = kmeans_best_of(deep, k, n_restarts=cfg.kmeans_restarts, base_seed=cfg.seed_kmeans,
                        max_iters=cfg.kmeans_max_iters, rel_tol=cfg.kmeans_tol, normalize=cfg.kmeans_normalize)
    out.update({
        "acc": float(clustering_accuracy(km.assignments, fine)),
        "ari": adjusted_rand_index(km.assignments, fine),
        "nmi": normalized_mutual_info(km.assignments, fine),
        "inertia": km.inertia,
    })
    out.update(distance_diagnostics(deep, coarse, fine))
    return out


def evaluate(params: EncoderParams, corpus: Corpus, cfg: ExperimentConfig, k: int | None = None,
             split: str = "test") -> dict:
    k = k or cfg.k or corpus.num_fine
    _, deep, logits = encode_split(params, corpus, split)
    return evaluate_features(deep, logits, corpus.split(split), cfg, k)


def _write_jsonl(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def train(cfg: ExperimentConfig, out_dir=None, corpus: Corpus | None = None):
    """Train with the full objective (or its ablations); returns (report, params, vocab, corpus)."""
    corpus, vocab = prepare(cfg, corpus)
    enc_cfg = cfg.encoder(len(vocab), corpus.num_coarse)
    ccfg = cfg.contrastive()
    params = init_params(enc_cfg, cfg.seed_model)
    momentum = params.clone(requires_grad=False)
    bank = QueueBank(corpus.num_coarse, ccfg.queue_capacity, enc_cfg.hidden_dim)
    state = optim.init_state(params.arrays(), cfg.optim())
    k = cfg.k or corpus.num_fine
    report = RunReport(cfg.hash(), {"model": cfg.seed_model, "data": cfg.seed_data, "kmeans": cfg.seed_kmeans})

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        metrics_fh = open(out / "metrics.jsonl", "w")

    def probe(epoch: int):
        m = evaluate(params, corpus, cfg, k)
        m["epoch"] = epoch
        report.probes.append(m)
        _write_jsonl(metrics_fh, {"probe": m})
        log.info("epoch %d probe: %s", epoch, m)

    probes = cfg.probes()
    try:
        if 0 in probes:
            probe(0)
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            sums: dict[str, float] = {}
            n_batches = 0
            for bi, batch in enumerate(batches(corpus, cfg.batch_size, cfg.seed_data, epoch)):
                try:
                    parts = train_step(params, momentum, bank, state, batch, ccfg, cfg, step)
                except (ValueError, FloatingPointError) as e:
                    raise TrainingError(f"epoch {epoch} batch {bi} (config {report.config_hash}): {e}") from e
                step += 1
                n_batches += 1
                for key, v in parts.items():
                    sums[key] = sums.get(key, 0.0) + v
                _write_jsonl(metrics_fh, {"step": step, **parts, "queue_fill": bank.fill_levels()})
            row = {"epoch": epoch, **{key: v / max(n_batches, 1) for key, v in sums.items()},
                   "seconds": time.perf_counter() - t0}
            report.epochs.append(row)
            _write_jsonl(metrics_fh, {"epoch_summary": row})
            if epoch in probes and epoch != 0:
                probe(epoch)
        final = evaluate(params, corpus, cfg, k)
        report.final = final
        _write_jsonl(metrics_fh, {"final": final})
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out is not None:
        save_checkpoint(out / "checkpoint.npz", params, extra=checkpoint_extra(cfg, vocab, corpus))
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report, params, vocab, corpus


def train_step(params, momentum, bank, state, batch, ccfg: ContrastiveConfig, cfg: ExperimentConfig, step: int):
    use_bank = ccfg.gamma2 and ccfg.use_momentum
    if use_bank:
        mdeep = encode(momentum, batch.tokens, batch.mask, mode="eval").deep
    with T.Tape() as tape:
        feats = encode(params, batch.tokens, batch.mask, mode="train", seed=cfg.seed_model, step=2 * step)
        positive = None
        if ccfg.gamma2 and not ccfg.use_self_contrast:
            # second dropout view of the same documents stands in for the shallow positive
            positive = encode(params, batch.tokens, batch.mask, mode="train", seed=cfg.seed_model,
                              step=2 * step + 1).deep
        loss, parts = total_loss(feats, batch.coarse, bank if use_bank else None, ccfg, positive)
    params.zero_grad()
    T.backward(loss, tape)
    grads, norm = optim.clip_global_norm(params.grads(), cfg.clip_norm)
    new = optim.step(params.arrays(), grads, state)
    for name, p in params:
        p.data = new[name]
    if use_bank:
        momentum_update(params, momentum, ccfg.momentum)
        enqueue_batch(bank, mdeep, batch.coarse)
    parts["grad_norm"] = norm
    return parts


def checkpoint_extra(cfg: ExperimentConfig, vocab: Vocab, corpus: Corpus) -> dict:
    return {"experiment": cfg.to_dict(), "vocab": vocab.tokens, "coarse_names": corpus.coarse_names}


def load_for_eval(checkpoint, data_path, seed: int = 0):
    """Load a checkpoint and re-tokenize a corpus file with the checkpoint's vocabulary."""
    params, extra = load_checkpoint(checkpoint)
    cfg = ExperimentConfig.from_dict(extra["experiment"])
    vocab = Vocab(extra["vocab"])
    if len(vocab) != params.config.vocab_size:
        raise ValueError(f"vocab size {len(vocab)} does not match encoder vocab_size {params.config.vocab_size}")
    raw = load_corpus(data_path, seed=seed)
    names = extra["coarse_names"]
    if raw.coarse_names != names[: len(raw.coarse_names)] or len(raw.coarse_names) > len(names):
        raise ValueError(f"coarse labels {raw.coarse_names} do not match checkpoint labels {names}")
    words = [w for d in raw.documents for w in d.text.split()]
    oov = sum(w not in vocab.index for w in words) / max(len(words), 1)
    if oov > 0.5:
        raise ValueError(f"vocabulary mismatch: {oov:.0%} of corpus tokens are unknown to the checkpoint")
    corpus = tokenize(raw, vocab, params.config.max_seq_len)
    return params, cfg, corpus


def evaluate_checkpoint(checkpoint, data_path, k: int | None = None, seed_kmeans: int | None = None) -> dict:
    params, cfg, corpus = load_for_eval(checkpoint, data_path)
    if seed_kmeans is not None:
        cfg = replace(cfg, seed_kmeans=seed_kmeans)
    return evaluate(params, corpus, cfg, k)


def export_embeddings(params: EncoderParams, corpus: Corpus, out_path) -> int:
    n = 0
    with open(out_path, "w") as fh:
        for split in ("train", "test"):
            docs = corpus.split(split)
            if not docs:
                continue
            shallow, deep, _ = encode_split(params, corpus, split)
            for d, s, h in zip(docs, shallow, deep):
                rec = {"id": n, "split": split, "coarse": corpus.coarse_names[d.coarse]}
                if d.fine is not None:
                    rec["fine"] = corpus.fine_names[d.fine]
                rec["deep"] = h.tolist()
                rec["shallow"] = s.tolist()
                fh.write(json.dumps(rec) + "\n")
                n += 1
    return n


SWEEP_AXES = ("tap_layer", "weight_ratio")


def sweep_configs(cfg: ExperimentConfig, axis: str, values) -> list[ExperimentConfig]:
    if axis == "tap_layer":
        return [replace(cfg, tap_layer=int(v)) for v in values]
    if axis == "weight_ratio":
        # beta = alpha_diff / alpha_same with alpha_same fixed at 1
        return [replace(cfg, alpha_same=1.0, alpha_diff=float(v)) for v in values]
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def sweep(cfg: ExperimentConfig, axis: str, values, out_dir=None) -> list[dict]:
    rows = []
    for value, c in zip(values, sweep_configs(cfg, axis, values)):
        cell_dir = None if out_dir is None else Path(out_dir) / f"{axis}={value}"
        try:
            report, *_ = train(c, cell_dir)
            rows.append({axis: value, **report.final})
        except (ValueError, TrainingError) as e:
            rows.append({axis: value, "error": str(e)})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.json").write_text(json.dumps(rows, indent=2))
        (Path(out_dir) / "sweep.txt").write_text(format_table(rows, axis))
    return rows


def format_table(rows: list[dict], axis: str) -> str:
    cols = [axis, "acc", "ari", "nmi", "coarse_acc", "d_fine", "d_coarse"]
    lines = ["  ".join(f"{c:>10}" for c in cols)]
    for r in rows:
        if "error" in r:
            lines.append(f"{r[axis]!s:>10}  error: {r['error']}")
            continue
        cells = []
        for c in cols:
            v = r.get(c)
            cells.append(f"{v:>10.4f}" if isinstance(v, float) else f"{v!s:>10}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def config_field_names() -> list[str]:
    return [f.name for f in dataclasses.fields(ExperimentConfig)]
