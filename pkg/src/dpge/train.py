"""End-to-end drivers: DP pretraining (MLM + NSP) and non-private fine-tuning."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .accountant import (calibrate_sigma, compose, default_delta, rdp_curve,
                         rdp_to_eps)
from .config import FinetuneSettings, RunConfig
from .data import (ClassificationData, Corpus, DataConfigError, PretrainData, Vocab,
                   build_vocab, load_corpus, make_pretrain_examples,
                   make_synthetic_classification, split_validation, synthetic_corpus)
from .model import CLASSIFY, PRETRAIN, forward, loss_and_gradient
from .optim import (DpSgdConfig, NoiseStream, OptimizerState, PoissonSampler, adamw_step,
                    dp_train_step, warmup_steps)
from .params import (CheckpointError, ParamVector, init_params,
                     load_checkpoint, save_checkpoint)
from .telemetry import (MetricsRecord, emit_metrics_csv, emit_snr_csv, expected_noise_norm,
                        macro_f1, mlm_accuracy, nsp_accuracy)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BUDGET, EXIT_IO = 0, 2, 3, 4, 5

Log = Callable[[str], None]


class BudgetExhausted(RuntimeError):
    """The configured privacy budget does not allow (further) noisy steps."""


# -- data ---------------------------------------------------------------------

def load_or_make_corpus(cfg: RunConfig) -> Corpus:
    if cfg.corpus_path:
        return load_corpus(cfg.corpus_path)
    return synthetic_corpus(cfg.synthetic_tokens, cfg.seeds.data)


def pretraining_data(cfg: RunConfig, corpus: Corpus, vocab: Vocab
                     ) -> Tuple[PretrainData, PretrainData]:
    examples = make_pretrain_examples(corpus, vocab, cfg.model.max_seq_len, cfg.seeds.data,
                                      mask_rate=cfg.mask_rate, dupe_factor=cfg.dupe_factor)
    train, val = split_validation(examples, cfg.validation_fraction, cfg.seeds.data)
    if not val:
        raise DataConfigError("validation split is empty; use a larger corpus or fraction")
    return PretrainData(train), PretrainData(val)


@dataclass
class PretrainEval:
    mlm_loss: float
    nsp_loss: float
    mlm_acc: Optional[float]
    nsp_acc: Optional[float]

    @property
    def loss(self) -> float:
        """Validation loss as tracked in metrics.csv: MLM + NSP."""
        return self.mlm_loss + self.nsp_loss


def evaluate_pretrain(params: ParamVector, val: PretrainData, chunk: int = 64) -> PretrainEval:
    mlm_losses, nsp_losses, logits, targets, nsp_logits, nsp_labels = [], [], [], [], [], []
    for start in range(0, len(val), chunk):
        batch = val.batch(np.arange(start, min(start + chunk, len(val))))
        out = forward(params, batch, PRETRAIN)
        mlm_losses.append(out.mlm_losses)
        nsp_losses.append(out.nsp_losses)
        logits.append(out.mlm_logits.reshape(-1, out.mlm_logits.shape[-1]))
        targets.append(out.mlm_targets.reshape(-1))
        nsp_logits.append(out.nsp_logits)
        nsp_labels.append(batch.nsp_labels)
    return PretrainEval(float(np.concatenate(mlm_losses).mean()),
                        float(np.concatenate(nsp_losses).mean()),
                        mlm_accuracy(np.concatenate(logits), np.concatenate(targets)),
                        nsp_accuracy(np.concatenate(nsp_logits), np.concatenate(nsp_labels)))


# -- pretraining ------------------------------------------------------------------

@dataclass
class PretrainResult:
    status: int
    params: ParamVector
    vocab: Vocab
    records: List[MetricsRecord]
    epsilon: float
    best_order: int
    noise_multiplier: float
    sampling_rate: float
    delta: float
    dataset_size: int
    steps_completed: int
    message: str = ""


def resolve_noise(cfg: RunConfig, q: float, delta: float) -> float:
    if cfg.noise_multiplier is not None:
        return cfg.noise_multiplier
    return calibrate_sigma(cfg.target_epsilon, delta, q, cfg.steps)


def _initial_model(cfg: RunConfig, corpus: Corpus) -> Tuple[ParamVector, Vocab, dict]:
    if cfg.init_checkpoint:
        params, meta = load_checkpoint(cfg.init_checkpoint)
        if "vocab" not in meta:
            raise CheckpointError(f"{cfg.init_checkpoint}: no vocabulary in metadata")
        vocab = Vocab(meta["vocab"])
        expected = replace(cfg.model, vocab_size=len(vocab))
        if params.config != expected:
            raise CheckpointError(
                f"{cfg.init_checkpoint}: model config {params.config} does not match "
                f"the configured {expected}")
        return params, vocab, meta
    vocab = build_vocab(corpus, cfg.model.vocab_size)
    model_cfg = replace(cfg.model, vocab_size=len(vocab))
    return init_params(model_cfg, cfg.seeds.init), vocab, {}


def _checkpoint_meta(cfg: RunConfig, vocab: Vocab, step: int, eps: float, order: int,
                     sigma: float, q: float, delta: float) -> dict:
    return {
        "kind": "pretrain",
        "step": step,
        "seeds": asdict(cfg.seeds),
        "epsilon": eps,
        "best_order": order,
        "noise_multiplier": sigma,
        "sampling_rate": q,
        "delta": delta,
        "vocab": vocab.tokens,
        "code_version": __version__,
    }


def run_pretraining(cfg: RunConfig, output_dir, log: Log = print) -> PretrainResult:
    """DP pretraining loop. Writes checkpoints, metrics.csv and snr.csv into
    ``output_dir``; the CSVs are flushed even when the loop aborts."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_or_make_corpus(cfg)
    if len(corpus) < 2:
        raise DataConfigError("pretraining needs a corpus with at least 2 documents")
    params, vocab, _ = _initial_model(cfg, corpus)
    train, val = pretraining_data(cfg, corpus, vocab)
    N = len(train)
    B = cfg.dp.logical_batch_size
    q = min(1.0, B / N)
    delta = cfg.delta if cfg.delta is not None else default_delta(N)
    sigma = resolve_noise(cfg, q, delta)
    T = cfg.steps
    curve = rdp_curve(q, sigma)

    def eps_after(t: int) -> Tuple[float, int]:
        return rdp_to_eps(compose(curve, t), delta)

    if cfg.target_epsilon is not None and cfg.budget_mode == "fixed-steps":
        eps_T, _ = eps_after(T)
        if eps_T > cfg.target_epsilon:
            raise BudgetExhausted(
                f"{T} steps at sigma={sigma:g}, q={q:.6g} spend eps={eps_T:.6g} "
                f"> target {cfg.target_epsilon:g}")

    dp = DpSgdConfig(noise_multiplier=sigma, logical_batch_size=B,
                     shard_size=min(cfg.dp.shard_size, B), peak_lr=cfg.dp.peak_lr,
                     total_steps=T, clip_norm=cfg.clip_norm,
                     weight_decay=cfg.dp.weight_decay, adam_beta1=cfg.dp.adam_beta1,
                     adam_beta2=cfg.dp.adam_beta2, adam_eps=cfg.dp.adam_eps)
    log(f"dataset N={N} (validation {len(val)}), vocab {len(vocab)}, params {len(params)}")
    log(f"q={q:.6g} sigma={sigma:.6g} delta={delta:.3g} steps={T} "
        f"warmup={warmup_steps(T)}")

    opt = OptimizerState.zeros(len(params))
    sampler = PoissonSampler(N, q, cfg.seeds.data)
    noise = NoiseStream(cfg.seeds.noise)
    dropout_seed = cfg.seeds.dropout if cfg.model.dropout_rate > 0 else None
    eps0, order0 = eps_after(0)
    ev = evaluate_pretrain(params, val)
    records = [MetricsRecord(step=0, train_loss=None, lr=0.0, batch_size=0,
                             eval_loss=ev.loss, mlm_acc=ev.mlm_acc, nsp_acc=ev.nsp_acc,
                             epsilon_spent=eps0)]
    log(f"step 0: eval_loss={ev.loss:.4f} (mlm {ev.mlm_loss:.4f})")
    status, message = EXIT_OK, ""
    eps, order, done = eps0, order0, 0

    def meta(step):
        return _checkpoint_meta(cfg, vocab, step, eps, order, sigma, q, delta)

    try:
        for t in range(1, T + 1):
            eps_t, order_t = eps_after(t)
            if cfg.target_epsilon is not None and eps_t > cfg.target_epsilon:
                status = EXIT_BUDGET
                message = (f"stopping before step {t}: eps would reach {eps_t:.6g} "
                           f"> target {cfg.target_epsilon:g}")
                log(message)
                break
            params, opt, rep = dp_train_step(params, opt, dp, train, sampler, noise, t,
                                             PRETRAIN, dropout_seed=dropout_seed)
            eps, order, done = eps_t, order_t, t
            if cfg.snr_noise == "expected":
                snr = rep.signal_norm / expected_noise_norm(sigma, cfg.clip_norm, len(params))
            else:
                snr = rep.snr
            rec = MetricsRecord(step=t, train_loss=rep.loss, lr=rep.lr,
                                batch_size=rep.batch_size, snr=snr, epsilon_spent=eps)
            if t % cfg.eval_every == 0 or t == T:
                ev = evaluate_pretrain(params, val)
                rec.eval_loss, rec.mlm_acc, rec.nsp_acc = ev.loss, ev.mlm_acc, ev.nsp_acc
                log(f"step {t}: train_loss={rep.loss:.4f} eval_loss={ev.loss:.4f} "
                    f"(mlm {ev.mlm_loss:.4f}) snr={snr:.4g} eps={eps:.4f}")
            records.append(rec)
            if cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{t:06d}.dpge", params, meta(t))
    finally:
        write_metrics(out, records)
    if done and records[-1].eval_loss is None:
        ev = evaluate_pretrain(params, val)
        records[-1].eval_loss, records[-1].mlm_acc, records[-1].nsp_acc = \
            ev.loss, ev.mlm_acc, ev.nsp_acc
        write_metrics(out, records)
    save_checkpoint(out / "model.dpge", params, meta(done))
    return PretrainResult(status, params, vocab, records, eps, order, sigma, q, delta, N,
                          done, message)


def write_metrics(out: Path, records: Sequence[MetricsRecord]) -> None:
    buf = io.StringIO()
    emit_metrics_csv(records, buf)
    (out / "metrics.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")
    buf = io.StringIO()
    emit_snr_csv(records, buf)
    (out / "snr.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")


# -- fine-tuning -------------------------------------------------------------------

@dataclass
class FinetuneResult:
    macro_f1: float
    accuracy: float
    validation_losses: List[float]
    epochs_run: int
    best_epoch: int
    params: ParamVector = field(repr=False)


def classification_splits(vocab: Vocab, settings: FinetuneSettings, seed: int,
                          exclude: Optional[Sequence[Sequence[int]]] = None
                          ) -> Tuple[ClassificationData, ClassificationData, ClassificationData]:
    n_tr, n_va, n_te = settings.num_train, settings.num_validation, settings.num_test
    parts = []
    for k, n in enumerate((n_tr, n_va, n_te)):
        parts.append(make_synthetic_classification(
            vocab, n, seed * 3 + k, seq_len=settings.seq_len,
            num_triggers=settings.num_triggers, exclude=exclude))
    return tuple(parts)


def _class_eval(params: ParamVector, data: ClassificationData, chunk: int = 128):
    losses, preds = [], []
    for start in range(0, len(data), chunk):
        out = forward(params, data.batch(slice(start, start + chunk)), CLASSIFY)
        losses.append(out.losses)
        preds.append(np.argmax(out.class_logits, axis=-1))
    return float(np.concatenate(losses).mean()), np.concatenate(preds)


def finetune_classifier(params: ParamVector, data: Tuple[ClassificationData, ...],
                        settings: FinetuneSettings, seed: int,
                        log: Optional[Log] = None) -> FinetuneResult:
    """Non-private AdamW fine-tuning of the whole network with early stopping
    on validation loss; the best epoch's weights are scored on the test split."""
    train, val, test = data
    opt = OptimizerState.zeros(len(params))
    best_loss, _ = _class_eval(params, val)
    best, best_epoch, bad = params, 0, 0
    history = [best_loss]
    epochs_run = 0
    for epoch in range(1, settings.epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(train))
        for start in range(0, len(order), settings.batch_size):
            batch = train.batch(order[start:start + settings.batch_size])
            _, grad = loss_and_gradient(params, batch, CLASSIFY)
            opt, params = adamw_step(opt, params, grad, settings.lr, settings.weight_decay)
        epochs_run = epoch
        loss, _ = _class_eval(params, val)
        history.append(loss)
        if log:
            log(f"epoch {epoch}: validation loss {loss:.4f}")
        if loss < best_loss:
            best, best_loss, best_epoch, bad = params, loss, epoch, 0
        else:
            bad += 1
            if bad >= settings.patience:
                break
    _, preds = _class_eval(best, test)
    labels = test.labels
    return FinetuneResult(macro_f1(preds, labels, best.config.num_labels),
                          float((preds == labels).mean()), history, epochs_run,
                          best_epoch, best)


def finetune_model_and_vocab(cfg: RunConfig, checkpoint=None, from_scratch: bool = False
                             ) -> Tuple[ParamVector, Vocab, Optional[Corpus]]:
    """Pretrained weights from ``checkpoint`` or a fresh init over the corpus vocabulary.

    With ``from_scratch`` the checkpoint only supplies vocabulary and model shape,
    which gives the random-init baseline for a paired comparison.
    """
    if checkpoint is not None:
        params, meta = load_checkpoint(checkpoint)
        if "vocab" not in meta:
            raise CheckpointError(f"{checkpoint}: no vocabulary in metadata")
        vocab = Vocab(meta["vocab"])
        expected = replace(cfg.model, vocab_size=len(vocab))
        if params.config != expected:
            raise CheckpointError(
                f"{checkpoint}: model config {params.config} does not match "
                f"the configured {expected}")
        corpus = load_or_make_corpus(cfg) if cfg.corpus_path else None
        if from_scratch:
            params = init_params(params.config, cfg.seeds.init)
        return params, vocab, corpus
    corpus = load_or_make_corpus(cfg)
    vocab = build_vocab(corpus, cfg.model.vocab_size)
    params = init_params(replace(cfg.model, vocab_size=len(vocab)), cfg.seeds.init)
    return params, vocab, corpus


def run_finetuning(cfg: RunConfig, checkpoint=None, log: Log = print,
                   from_scratch: bool = False) -> FinetuneResult:
    params, vocab, corpus = finetune_model_and_vocab(cfg, checkpoint, from_scratch)
    exclude = ([vocab.encode(s) for s in corpus.sentences()] if corpus is not None else None)
    data = classification_splits(vocab, cfg.finetune, cfg.seeds.data, exclude)
    return finetune_classifier(params, data, cfg.finetune, cfg.seeds.data, log)


# -- manifests -------------------------------------------------------------------------

def write_manifest(out: Path, cfg: RunConfig, command: str, status: int,
                   extra: Optional[dict] = None) -> Path:
    manifest = {
        "dpge_manifest": 1,
        "code_version": __version__,
        "command": command,
        "exit_status": status,
        "seeds": asdict(cfg.seeds),
        "resolved_config": cfg.to_dict(),
    }
    manifest.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path

