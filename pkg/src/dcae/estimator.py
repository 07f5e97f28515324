"""scikit-learn style wrapper around model assembly, training and decoding."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .eval import decode_logits, frame_accuracy, score_corpus
from .graph import (Topology, alignment_phones, build_decode_graph, build_denominator,
                    chain_alignment, estimate_bigram, estimate_phone_lm)
from .loss import log_softmax
from .model import Model, ModelConfig, strip_decoders
from .net import CodeLayout, UNetMode
from .train import ChainSetup, TrainSchedule, train
from .validation import check_utterances


def default_layout(kind: str, p_size: int, r_ratio: float = 0.5, s_size: int | None = None,
                   c_size: int | None = None) -> CodeLayout:
    """Code layout for ``kind``: R-Code from ``r_ratio``, S/C-Code default to P-Code width."""
    r = int(round(r_ratio * p_size))
    if kind == "baseline":
        return CodeLayout(p_size)
    if kind == "c_dcae":
        return CodeLayout(p_size, 0, r)
    s = p_size if s_size is None else s_size
    if kind == "pc_dcae":
        return CodeLayout(p_size, s, r)
    return CodeLayout(p_size, s, r, p_size if c_size is None else c_size)


class DcAEAcousticModel(BaseEstimator):
    """Chain acoustic model (baseline, c-DcAE, pc-DcAE or hc-DcAE).

    ``fit`` takes a list of :class:`~dcae.corpus.Utterance`. The phone LM of
    the denominator graph is estimated from the training alignments. Passing a
    ``lexicon`` (word -> phone tuple) to ``fit`` also builds a word decoding
    graph, which enables ``predict``.

    Parameters
    ----------
    kind : {"baseline", "c_dcae", "pc_dcae", "hc_dcae"}
    unet, unet_weight : U-Net connection between encoder and Decoder I.
    r_ratio : R-Code width over P-Code width.
    encoder2_depth : Encoder II depth for hc-DcAE; ``encoder_depth`` is the total.
    warm_start_epochs : leading epochs trained on reconstruction terms only.
    """

    def __init__(self, kind="c_dcae", hidden_dim=64, bottleneck_dim=16, encoder_depth=5,
                 encoder2_depth=1, decoder1_depth=2, decoder2_depth=2, p_size=None,
                 s_size=None, c_size=None, r_ratio=0.5, unet="none", unet_weight=1.0,
                 subsample_factor=3, epochs=15, warm_start_epochs=0, learning_rate=0.005,
                 lr_decay=0.9, momentum=0.9, batch_size=8, alpha=0.5, beta=0.5,
                 ce_weight=5.0, random_state=0, jobs=1):
        self.kind = kind
        self.hidden_dim = hidden_dim
        self.bottleneck_dim = bottleneck_dim
        self.encoder_depth = encoder_depth
        self.encoder2_depth = encoder2_depth
        self.decoder1_depth = decoder1_depth
        self.decoder2_depth = decoder2_depth
        self.p_size = p_size
        self.s_size = s_size
        self.c_size = c_size
        self.r_ratio = r_ratio
        self.unet = unet
        self.unet_weight = unet_weight
        self.subsample_factor = subsample_factor
        self.epochs = epochs
        self.warm_start_epochs = warm_start_epochs
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.momentum = momentum
        self.batch_size = batch_size
        self.alpha = alpha
        self.beta = beta
        self.ce_weight = ce_weight
        self.random_state = random_state
        self.jobs = jobs

    def _model_config(self, feat_dim, spk_dim, num_senones) -> ModelConfig:
        p = self.hidden_dim if self.p_size is None else self.p_size
        return ModelConfig(
            kind=self.kind, feat_dim=feat_dim, spk_dim=spk_dim, num_senones=num_senones,
            hidden_dim=self.hidden_dim, bottleneck_dim=self.bottleneck_dim,
            encoder_depth=self.encoder_depth,
            encoder2_depth=self.encoder2_depth if self.kind == "hc_dcae" else 0,
            decoder1_depth=self.decoder1_depth, decoder2_depth=self.decoder2_depth,
            code_layout=default_layout(self.kind, p, self.r_ratio, self.s_size, self.c_size),
            unet=UNetMode(self.unet, self.unet_weight),
            subsample_factor=self.subsample_factor, seed=self.random_state)

    def _schedule(self) -> TrainSchedule:
        return TrainSchedule(
            epochs=self.epochs, warm_start_epochs=self.warm_start_epochs,
            learning_rate=self.learning_rate, lr_decay=self.lr_decay, momentum=self.momentum,
            batch_size=self.batch_size, seed=self.random_state, alpha=self.alpha,
            beta=self.beta, ce_weight=self.ce_weight, jobs=self.jobs)

    def fit(self, X, y=None, lexicon=None, num_phones=None):
        utts = check_utterances(X)
        if num_phones is None:
            num_phones = int(max(u.alignment.max() for u in utts)) // 2 + 1
        topo = Topology(num_phones)
        lm = estimate_phone_lm([alignment_phones(u.alignment) for u in utts], num_phones)
        setup = ChainSetup(topo, build_denominator(lm, topo), list(lexicon or []))
        cfg = self._model_config(utts[0].noisy.shape[1], utts[0].spk_embed.shape[0],
                                 topo.num_senones)
        self.model_, self.history_ = train(Model(cfg), utts, self._schedule(), setup)
        self.topology_ = topo
        self.denominator_ = setup.denominator
        self.decode_graph_ = None
        if lexicon is not None:
            lexicon = [tuple(w) for w in lexicon]
            word_lm = estimate_bigram([u.transcript for u in utts], len(lexicon))
            self.decode_graph_ = build_decode_graph(lexicon, word_lm, topo)
        self.n_features_in_ = cfg.feat_dim
        return self

    def _logits(self, utts):
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        utts = check_utterances(utts, cfg.feat_dim, cfg.spk_dim)
        inference = strip_decoders(self.model_)
        return [inference.forward(u.noisy, u.spk_embed).senone_logits for u in utts]

    def transform(self, X):
        """Per-utterance senone log-posteriors at the output frame rate."""
        return [log_softmax(lg) for lg in self._logits(X)]

    def predict_senones(self, X):
        return [np.argmax(lg, axis=1) for lg in self._logits(X)]

    def predict(self, X):
        """Decoded word-id sequences (needs ``lexicon`` at fit time)."""
        check_is_fitted(self, "model_")
        if self.decode_graph_ is None:
            raise ValueError("fit was called without a lexicon; cannot decode words")
        return [decode_logits(lg, self.decode_graph_) for lg in self._logits(X)]

    def score(self, X, y=None):
        """Mean frame accuracy (percent) against the utterances' own alignments."""
        utts = check_utterances(X)
        f = self.model_.config.subsample_factor if hasattr(self, "model_") else 1
        accs = [frame_accuracy(lg, chain_alignment(u.alignment, f))
                for lg, u in zip(self._logits(utts), utts)]
        return float(np.mean(accs))

    def word_error_rates(self, X):
        """Per-condition WER in percent, pooled over the utterances of each condition."""
        utts = check_utterances(X)
        hyps = dict(zip([u.id for u in utts], self.predict(utts)))
        refs = {u.id: list(u.transcript) for u in utts}
        return score_corpus(refs, hyps, {u.id: u.condition for u in utts})[0]
