"""Encoder-decoder Transformer over the 384-token byte vocabulary.

Encoder blocks use the sparse (sliding + block-global) attention; decoder
blocks use dense causal self-attention plus dense cross-attention, since
target sequences stay short at this scale. All blocks are pre-norm RMS
with residual connections, and a bucketed relative-position bias (shared
across the layers of each stack) carries position information.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attention as attn
from . import numerics as nm
from . import tokenizer as tok
from ._version import TOOL_VERSION
from .attention import AttnSpec, HeadProjections, LayerRadiusSchedule, multi_head
from .numerics import Tensor, no_grad


class ConfigError(ValueError):
    """Inconsistent model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    d_kv: int
    d_ff: int
    n_encoder_layers: int
    n_decoder_layers: int
    heads: int
    dropout_rate: float = 0.1
    vocab: int = tok.VOCAB_SIZE
    max_len: int = 2048
    encoder_attention: str = "sliding_global"  # dense | sliding | sliding_global
    r_small: int = 64
    r_large: int = 128
    k_blocks: int = 16
    radius_style: str = "paper"  # paper: small r for first 3 layers; scaled: first half
    rel_buckets: int = 32
    rel_max_distance: int = 128

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if self.vocab != tok.VOCAB_SIZE:
            raise ConfigError(f"vocabulary is fixed at {tok.VOCAB_SIZE}")
        if min(self.d_model, self.d_kv, self.d_ff, self.heads,
               self.n_encoder_layers, self.n_decoder_layers) < 1:
            raise ConfigError("all dimensions must be positive")
        if self.encoder_attention not in ("dense", "sliding", "sliding_global"):
            raise ConfigError(f"unknown encoder attention {self.encoder_attention!r}")

    def radius_schedule(self) -> LayerRadiusSchedule:
        if self.radius_style == "paper":
            return LayerRadiusSchedule.paper_style(self.n_encoder_layers,
                                                   self.r_small, self.r_large)
        return LayerRadiusSchedule.scaled(self.n_encoder_layers, self.r_small, self.r_large)


def base_config() -> ModelConfig:
    return ModelConfig(d_model=1536, d_kv=64, d_ff=3584, n_encoder_layers=8,
                       n_decoder_layers=4, heads=12, dropout_rate=0.1, max_len=2048,
                       r_small=64, r_large=128, k_blocks=16, radius_style="paper")


def large_config() -> ModelConfig:
    return ModelConfig(d_model=1536, d_kv=64, d_ff=3850, n_encoder_layers=24,
                       n_decoder_layers=12, heads=16, dropout_rate=0.1, max_len=2048,
                       r_small=64, r_large=128, k_blocks=16, radius_style="paper")


def toy_config(**overrides) -> ModelConfig:
    kw = dict(d_model=64, d_kv=16, d_ff=128, n_encoder_layers=4, n_decoder_layers=2,
              heads=4, dropout_rate=0.1, max_len=512, r_small=8, r_large=16,
              k_blocks=4, radius_style="scaled")
    kw.update(overrides)
    return ModelConfig(**kw)


PRESETS = {"toy": toy_config, "base": base_config, "large": large_config}


def parameter_count(config: ModelConfig, n_classes=None) -> int:
    """Analytic parameter count for a configuration (no allocation)."""
    d, h, dk, dff, V = config.d_model, config.heads, config.d_kv, config.d_ff, config.vocab
    attn_block = 3 * d * h * dk + h * dk * d
    enc_layer = attn_block + 2 * d * dff + 2 * d  # two norm gains
    dec_layer = 2 * attn_block + 2 * d * dff + 3 * d
    total = V * d  # embedding
    total += 2 * config.rel_buckets * h  # relpos tables, one per stack
    total += config.n_encoder_layers * enc_layer + d  # + final norm
    total += config.n_decoder_layers * dec_layer + d
    total += d * V  # LM head
    if n_classes is not None:
        total += d * n_classes + n_classes
    return total


class Model:
    """A built encoder-decoder model: parameters plus forward machinery.

    Immutable for inference; training owns it exclusively (in-place
    optimizer updates).
    """

    def __init__(self, config: ModelConfig, seed: int, n_classes=None, dtype=np.float32):
        self.config = config
        self.seed = int(seed)
        self.n_classes = n_classes
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._init_params()
        self._radii = config.radius_schedule().radii

    # -- construction -----------------------------------------------------

    def _add(self, name, array):
        self.params[name] = Tensor(array.astype(self.dtype))

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(self.seed)

        def matrix(fan_in, fan_out):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

        self._add("embedding.weight", rng.normal(0.0, 1.0 / np.sqrt(cfg.d_model),
                                                 size=(cfg.vocab, cfg.d_model)))
        self._add("encoder.relpos.weight", matrix(cfg.rel_buckets, cfg.heads))
        self._add("decoder.relpos.weight", matrix(cfg.rel_buckets, cfg.heads))
        hdk = cfg.heads * cfg.d_kv
        for i in range(cfg.n_encoder_layers):
            p = f"encoder.block{i}"
            self._add(f"{p}.attn_norm.gain", np.ones(cfg.d_model))
            for w in ("wq", "wk", "wv"):
                self._add(f"{p}.attn.{w}", matrix(cfg.d_model, hdk))
            self._add(f"{p}.attn.wo", matrix(hdk, cfg.d_model))
            self._add(f"{p}.ffn_norm.gain", np.ones(cfg.d_model))
            self._add(f"{p}.ffn.w1", matrix(cfg.d_model, cfg.d_ff))
            self._add(f"{p}.ffn.w2", matrix(cfg.d_ff, cfg.d_model))
        self._add("encoder.final_norm.gain", np.ones(cfg.d_model))
        for i in range(cfg.n_decoder_layers):
            p = f"decoder.block{i}"
            self._add(f"{p}.self_norm.gain", np.ones(cfg.d_model))
            for w in ("wq", "wk", "wv"):
                self._add(f"{p}.self.{w}", matrix(cfg.d_model, hdk))
            self._add(f"{p}.self.wo", matrix(hdk, cfg.d_model))
            self._add(f"{p}.cross_norm.gain", np.ones(cfg.d_model))
            for w in ("wq", "wk", "wv"):
                self._add(f"{p}.cross.{w}", matrix(cfg.d_model, hdk))
            self._add(f"{p}.cross.wo", matrix(hdk, cfg.d_model))
            self._add(f"{p}.ffn_norm.gain", np.ones(cfg.d_model))
            self._add(f"{p}.ffn.w1", matrix(cfg.d_model, cfg.d_ff))
            self._add(f"{p}.ffn.w2", matrix(cfg.d_ff, cfg.d_model))
        self._add("decoder.final_norm.gain", np.ones(cfg.d_model))
        self._add("lm_head.weight", matrix(cfg.d_model, cfg.vocab))
        if self.n_classes is not None:
            self._add("head.weight", matrix(cfg.d_model, self.n_classes))
            self._add("head.bias", np.zeros(self.n_classes))

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def attach_head(self, n_classes):
        """Add (or replace) the classification head, seed-deterministically."""
        if self.n_classes == n_classes:
            return self
        rng = np.random.default_rng(nm.derive_seed(self.seed, "head", n_classes))
        d = self.config.d_model
        self.params.pop("head.weight", None)
        self.params.pop("head.bias", None)
        self.n_classes = n_classes
        if n_classes is not None:
            w = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, n_classes))
            self._add("head.weight", w)
            self._add("head.bias", np.zeros(n_classes))
        return self

    def parameter_groups(self):
        """Layer groups in unfreeze order: head, decoder top-down, encoder top-down.

        The embedding and position tables travel with the bottom encoder
        block (they unfreeze last); each stack's final norm joins its top
        block.
        """
        cfg = self.config
        groups = []
        head = ["lm_head.weight"]
        if self.n_classes is not None:
            head += ["head.weight", "head.bias"]
        groups.append(("head", head))
        for i in reversed(range(cfg.n_decoder_layers)):
            names = [n for n in self.params if n.startswith(f"decoder.block{i}.")]
            if i == cfg.n_decoder_layers - 1:
                names.append("decoder.final_norm.gain")
            if i == 0:
                names.append("decoder.relpos.weight")
            groups.append((f"decoder.block{i}", names))
        for i in reversed(range(cfg.n_encoder_layers)):
            names = [n for n in self.params if n.startswith(f"encoder.block{i}.")]
            if i == cfg.n_encoder_layers - 1:
                names.append("encoder.final_norm.gain")
            if i == 0:
                names += ["encoder.relpos.weight", "embedding.weight"]
            groups.append((f"encoder.block{i}", names))
        return groups

    # -- sublayers ----------------------------------------------------------

    def _drop(self, x, training, rng):
        return nm.dropout(x, self.config.dropout_rate, rng=rng, training=training)

    def _weight_dropout(self, training, rng):
        if not training or self.config.dropout_rate == 0.0:
            return None
        return lambda w: nm.dropout(w, self.config.dropout_rate, rng=rng, training=True)

    def _ffn(self, x, prefix, training, rng):
        h = nm.relu(nm.matmul(x, self.params[f"{prefix}.w1"]))
        h = self._drop(h, training, rng)
        return nm.matmul(h, self.params[f"{prefix}.w2"])

    def _proj(self, prefix) -> HeadProjections:
        p = self.params
        return HeadProjections(wq=p[f"{prefix}.wq"], wk=p[f"{prefix}.wk"],
                               wv=p[f"{prefix}.wv"], wo=p[f"{prefix}.wo"])

    def _norm(self, x, name):
        return nm.rms_norm(x, self.params[name])

    # -- encoder --------------------------------------------------------------

    def encode(self, tokens, pad_mask=None, training=False, rng=None, collect_maps=None):
        """Contextual states [..., L, d_model] for token ids [..., L].

        ``pad_mask`` marks real tokens (True); padded keys are invisible
        to attention. ``collect_maps``, if a list, receives per-layer
        attention weights for export.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        L = tokens.shape[-1]
        if L > cfg.max_len:
            raise ValueError(f"input length {L} exceeds max_len {cfg.max_len}; crop first")
        if L == 0:
            raise ValueError("cannot encode an empty sequence")
        x = nm.take_rows(self.params["embedding.weight"], tokens)
        x = self._drop(x, training, rng)
        wdrop = self._weight_dropout(training, rng)
        for i in range(cfg.n_encoder_layers):
            p = f"encoder.block{i}"
            r = min(self._radii[i], max(1, L - 1))
            if cfg.encoder_attention == "dense":
                spec = AttnSpec(mode="dense", causal=False, heads=cfg.heads, d_kv=cfg.d_kv)
                bias = attn.dense_position_bias(self.params["encoder.relpos.weight"], L, L,
                                                causal=False, num_buckets=cfg.rel_buckets,
                                                max_distance=cfg.rel_max_distance)
            else:
                k_blocks = min(cfg.k_blocks, L)
                mode = cfg.encoder_attention
                spec = AttnSpec(mode=mode, r=r, k=k_blocks if mode == "sliding_global" else None,
                                causal=False, heads=cfg.heads, d_kv=cfg.d_kv)
                bias = attn.slot_position_bias(self.params["encoder.relpos.weight"], r,
                                               causal=False, num_buckets=cfg.rel_buckets,
                                               max_distance=cfg.rel_max_distance)
            collect = {} if collect_maps is not None else None
            y = multi_head(self._norm(x, f"{p}.attn_norm.gain"), self._proj(f"{p}.attn"),
                           spec, key_valid=pad_mask, bias=bias, weight_dropout=wdrop,
                           collect=collect)
            x = nm.add(x, y)
            x = nm.add(x, self._ffn(self._norm(x, f"{p}.ffn_norm.gain"), f"{p}.ffn",
                                    training, rng))
            if collect_maps is not None:
                collect["layer"] = i
                collect["mode"] = spec.mode
                collect_maps.append(collect)
        x = self._norm(x, "encoder.final_norm.gain")
        return self._drop(x, training, rng)

    # -- decoder -----------------------------------------------------------------

    def _decoder_forward(self, input_ids, encoder_states, enc_valid=None,
                         training=False, rng=None):
        """Logits [..., T, vocab] from already-shifted decoder input ids."""
        cfg = self.config
        input_ids = np.asarray(input_ids, dtype=np.int64)
        T = input_ids.shape[-1]
        if T > cfg.max_len:
            raise ValueError(f"target length {T} exceeds max_len {cfg.max_len}")
        x = nm.take_rows(self.params["embedding.weight"], input_ids)
        x = self._drop(x, training, rng)
        wdrop = self._weight_dropout(training, rng)
        self_spec = AttnSpec(mode="dense", causal=True, heads=cfg.heads, d_kv=cfg.d_kv)
        cross_spec = AttnSpec(mode="dense", causal=False, heads=cfg.heads, d_kv=cfg.d_kv)
        self_bias = attn.dense_position_bias(self.params["decoder.relpos.weight"], T, T,
                                             causal=True, num_buckets=cfg.rel_buckets,
                                             max_distance=cfg.rel_max_distance)
        for i in range(cfg.n_decoder_layers):
            p = f"decoder.block{i}"
            y = multi_head(self._norm(x, f"{p}.self_norm.gain"), self._proj(f"{p}.self"),
                           self_spec, bias=self_bias, weight_dropout=wdrop)
            x = nm.add(x, y)
            y = multi_head(self._norm(x, f"{p}.cross_norm.gain"), self._proj(f"{p}.cross"),
                           cross_spec, kv=encoder_states, key_valid=enc_valid,
                           weight_dropout=wdrop)
            x = nm.add(x, y)
            x = nm.add(x, self._ffn(self._norm(x, f"{p}.ffn_norm.gain"), f"{p}.ffn",
                                    training, rng))
        x = self._norm(x, "decoder.final_norm.gain")
        x = self._drop(x, training, rng)
        return nm.matmul(x, self.params["lm_head.weight"])

    def decode_logits(self, target_prefix, encoder_states, enc_valid=None,
                      training=False, rng=None):
        """Teacher-forced logits: position t sees targets strictly before t.

        The decoder input is the prefix shifted right with PAD standing in
        as the start symbol.
        """
        prefix = np.asarray(target_prefix, dtype=np.int64)
        start = np.full(prefix.shape[:-1] + (1,), tok.PAD_ID, dtype=np.int64)
        shifted = np.concatenate([start, prefix[..., :-1]], axis=-1)
        return self._decoder_forward(shifted, encoder_states, enc_valid=enc_valid,
                                     training=training, rng=rng)

    # -- heads -------------------------------------------------------------------

    def classify_logits(self, tokens, pad_mask=None, training=False, rng=None):
        if self.n_classes is None:
            raise ConfigError("model was built without a classification head")
        states = self.encode(tokens, pad_mask=pad_mask, training=training, rng=rng)
        if pad_mask is None:
            pooled = nm.tmean(states, axis=-2)
        else:
            m = np.asarray(pad_mask, dtype=states.data.dtype)[..., None]
            total = nm.tsum(nm.mul(states, m), axis=-2)
            pooled = nm.mul(total, 1.0 / np.maximum(m.sum(axis=-2), 1.0))
        logits = nm.add(nm.matmul(pooled, self.params["head.weight"]),
                        self.params["head.bias"])
        return logits

    def classify(self, tokens, pad_mask=None):
        """Class probabilities (eval mode, no graph)."""
        with no_grad():
            probs = nm.softmax(self.classify_logits(tokens, pad_mask=pad_mask).data, axis=-1)
        return probs

    # -- generation -----------------------------------------------------------------

    def generate_greedy(self, source, max_new, eos_id=tok.EOS_ID):
        """Argmax decoding; returns generated ids with the EOS stripped."""
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        max_new = min(max_new, self.config.max_len - 1)
        source = np.asarray(source, dtype=np.int64)
        toks = []
        with no_grad():
            enc = self.encode(source)
            for _ in range(max_new):
                inp = np.array([tok.PAD_ID] + toks, dtype=np.int64)
                logits = self._decoder_forward(inp, enc).data[-1]
                t = int(np.argmax(logits))
                if t == eos_id:
                    break
                toks.append(t)
        return np.array(toks, dtype=np.int64)

    def generate_beam(self, source, n_beams, max_new, eos_id=tok.EOS_ID):
        """Beam search; returns n_beams (ids, score) pairs, best first.

        Each step keeps the n_beams highest-scoring continuations by
        cumulative log-probability; a continuation ending in EOS retires
        its slot. Final ranking (and the returned score) is the cumulative
        log-probability divided by generated length, EOS included; the
        returned ids have the EOS stripped. Ties break toward the
        lexicographically smaller token sequence. The pure-greedy rollout
        always joins the final ranking, so the top beam never scores
        below the greedy sequence.
        """
        if n_beams < 1 or max_new < 1:
            raise ValueError("need n_beams >= 1 and max_new >= 1")
        if n_beams >= self.config.vocab:
            raise ValueError("beam width must be smaller than the vocabulary")
        max_new = min(max_new, self.config.max_len - 1)
        source = np.asarray(source, dtype=np.int64)
        with no_grad():
            enc = self.encode(source)
            pool = self._beam_pool(enc, n_beams, max_new, eos_id)
            if n_beams > 1:
                seen = {tuple(t) for t, _, _ in pool}
                for entry in self._beam_pool(enc, 1, max_new, eos_id):
                    if tuple(entry[0]) not in seen:
                        pool.append(entry)
        pool.sort(key=lambda e: (-e[1] / max(e[2], 1), e[0]))
        return [(np.array(toks, dtype=np.int64), cum / max(n, 1))
                for toks, cum, n in pool[:n_beams]]

    def _beam_pool(self, enc, width, max_new, eos_id):
        """(token tuple, cum logp, generated length) for one beam run.

        Exactly ``width`` entries: every slot either retires via EOS or is
        force-finished at the horizon. With width 1 this is the greedy
        path (argsort ties resolve to the lowest token id, like argmax).
        """
        active = [((), 0.0)]
        finished = []
        for _ in range(max_new):
            if not active:
                break
            T = len(active[0][0]) + 1
            batch = np.full((len(active), T), tok.PAD_ID, dtype=np.int64)
            for b, (toks, _) in enumerate(active):
                if toks:
                    batch[b, 1:] = toks
            enc_b = Tensor(np.broadcast_to(enc.data, (len(active),) + enc.data.shape))
            logits = self._decoder_forward(batch, enc_b).data[:, -1, :]
            logp = logits - _logsumexp(logits, axis=-1, keepdims=True)
            candidates = []
            for b, (toks, cum) in enumerate(active):
                order = np.argsort(-logp[b], kind="stable")[:width]
                for t in order:
                    candidates.append((cum + float(logp[b, t]), toks, int(t)))
            candidates.sort(key=lambda c: (-c[0], c[1] + (c[2],)))
            keep = candidates[: width - len(finished)]
            active = []
            for cum, toks, t in keep:
                if t == eos_id:
                    finished.append((toks, cum, len(toks) + 1))
                else:
                    active.append((toks + (t,), cum))
        for toks, cum in active:
            finished.append((toks, cum, max(len(toks), 1)))
        return finished

    def sequence_score(self, source, generated, eos_id=tok.EOS_ID, ended_by_eos=True):
        """Length-normalized log-probability of a generated sequence."""
        source = np.asarray(source, dtype=np.int64)
        ids = list(np.asarray(generated, dtype=np.int64))
        full = ids + [eos_id] if ended_by_eos else ids
        with no_grad():
            enc = self.encode(source)
            logits = self.decode_logits(np.array(full), enc.data).data
        logp = logits - _logsumexp(logits, axis=-1, keepdims=True)
        total = float(sum(logp[t, full[t]] for t in range(len(full))))
        return total / max(len(full), 1)

    # -- attention map export ----------------------------------------------------------

    def export_attention_maps(self, tokens):
        """Per-layer, per-head post-softmax encoder score matrices.

        Returns a list of {layer, mode, legend, weights[H, L, cols]} in
        layer order; rows are row-stochastic up to clipped window slots.
        """
        maps = []
        with no_grad():
            self.encode(tokens, collect_maps=maps)
        return maps

    # -- checkpointing --------------------------------------------------------------------

    def save_checkpoint(self, stem, step=0, extra=None):
        """Write ``stem.json`` manifest + ``stem.bin`` little-endian f32 blob."""
        stem = str(stem)
        manifest = {
            "format": "enbedkit-checkpoint-v1",
            "tool_version": TOOL_VERSION,
            "config": asdict(self.config),
            "n_classes": self.n_classes,
            "seed": self.seed,
            "step": int(step),
            "dtype": "<f4",
            "vocabulary": {
                "size": tok.VOCAB_SIZE, "pad": tok.PAD_ID, "unk": tok.UNK_ID,
                "eos": tok.EOS_ID, "sentinel_base": tok.SENTINEL_BASE,
                "sentinels": tok.N_SENTINELS,
            },
            "params": [{"name": n, "shape": list(p.data.shape)}
                       for n, p in self.params.items()],
        }
        if extra:
            manifest["extra"] = extra
        blob = b"".join(p.data.astype("<f4").tobytes() for p in self.params.values())
        _atomic_write(stem + ".bin", blob)
        _atomic_write(stem + ".json",
                      json.dumps(manifest, sort_keys=True, indent=1).encode() + b"\n")

    @classmethod
    def load_checkpoint(cls, stem, dtype=np.float32):
        stem = str(stem)
        if stem.endswith(".json"):
            stem = stem[: -len(".json")]
        with open(stem + ".json", "rb") as fh:
            manifest = json.loads(fh.read())
        config = ModelConfig(**manifest["config"])
        model = cls(config, seed=manifest["seed"], n_classes=manifest["n_classes"],
                    dtype=dtype)
        with open(stem + ".bin", "rb") as fh:
            blob = fh.read()
        offset = 0
        for entry in manifest["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
            offset += n * 4
            model.params[name].data = arr.reshape(shape).astype(dtype)
        if offset != len(blob):
            raise ValueError(f"checkpoint blob size mismatch: read {offset}, file {len(blob)}")
        return model, manifest


def build(config: ModelConfig, seed: int, n_classes=None, dtype=np.float32) -> Model:
    """Construct a model with seed-deterministic initialization."""
    return Model(config, seed=seed, n_classes=n_classes, dtype=dtype)


def _logsumexp(x, axis=-1, keepdims=False):
    m = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
