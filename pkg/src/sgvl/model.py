"""Dual-encoder transformer with adaptive scene-graph tokens and LoRA adapters.

The text encoder is a standard CLS-readout transformer. The vision encoder
carries, besides CLS and patch tokens, a bank of learned object and relation
prompt tokens. Each transformer layer keeps two parameter sets: one applied
to CLS/patch rows and one applied to the prompt rows, while attention runs
jointly over all rows. Finetuning freezes the pretrained weights and learns
low-rank residuals (W = W0 + A @ B) plus the prompt bank and heads.

Forward passes are batched as (batch, tokens, d) arrays; single-sample entry
points wrap a batch of one.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .losses import PredictionHead

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+|[.,;!?]")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    layers: int = 4
    heads: int = 4
    patch: int = 8
    image_size: int = 32
    n_obj_tokens: int = 12
    n_rel_tokens: int = 12
    r_p: int = 4
    r_sg: int = 8
    max_length: int = 32
    mlp_ratio: int = 4
    init_std: float = 1.0
    ln_style: str = "post"    # "post" renormalizes the stream after each residual
    vocab_path: str = ""

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.image_size % self.patch:
            raise ValueError(f"image_size={self.image_size} must be divisible by patch={self.patch}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in raw.items() if k in known})

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "ModelConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


class Tokenizer:
    """Word-level tokenizer over a fixed lexicon, with CLS/PAD/UNK specials."""

    CLS, PAD, UNK = 0, 1, 2
    _SPECIALS = ("<cls>", "<pad>", "<unk>")

    def __init__(self, words: Sequence[str], max_length: int = 32):
        self.max_length = max_length
        self.words = list(dict.fromkeys(words))
        self.vocab: Dict[str, int] = {w: i for i, w in enumerate(self._SPECIALS)}
        for w in self.words:
            if w not in self.vocab:
                self.vocab[w] = len(self.vocab)
        self.id_to_word = {i: w for w, i in self.vocab.items()}

    def __len__(self) -> int:
        return len(self.vocab)

    @staticmethod
    def split(text: str) -> List[str]:
        return _TOKEN_RE.findall(text.lower())

    @classmethod
    def build(cls, texts: Sequence[str], max_length: int = 32) -> "Tokenizer":
        words: List[str] = []
        for t in texts:
            words.extend(cls.split(t))
        return cls(words, max_length=max_length)

    def encode(self, caption: str) -> np.ndarray:
        ids = [self.CLS] + [self.vocab.get(w, self.UNK) for w in self.split(caption)]
        if len(ids) > self.max_length:
            logger.warning("caption truncated from %d to %d tokens", len(ids), self.max_length)
            ids = ids[:self.max_length]
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.id_to_word[int(i)] for i in ids if int(i) >= len(self._SPECIALS)]

    def to_dict(self) -> dict:
        return {"words": self.words, "max_length": self.max_length}

    @classmethod
    def from_dict(cls, raw: dict) -> "Tokenizer":
        return cls(raw["words"], max_length=raw["max_length"])


@dataclass
class LoRAAdapter:
    """Frozen base matrix plus trainable low-rank residual."""

    w0: Parameter
    a: Parameter
    b: Parameter
    rank: int


def lora_effective_weight(adapter: LoRAAdapter) -> Tensor:
    """W0 + A @ B; gradients reach only A and B."""
    return ad.add(adapter.w0.tensor, ad.matmul(adapter.a.tensor, adapter.b.tensor))


class Linear:
    """A named weight/bias pair, optionally reparameterized with LoRA."""

    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 init_std: float):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.w = Parameter(f"{name}.w",
                           Tensor(rng.normal(0.0, init_std / np.sqrt(n_in), (n_in, n_out))))
        self.b = Parameter(f"{name}.b", Tensor(np.zeros(n_out)))
        self.lora: Optional[LoRAAdapter] = None

    def add_lora(self, rank: int, rng: np.random.Generator) -> None:
        """Freeze the base weight and attach rank-r trainable factors, with
        B zeroed so the effective weight starts exactly at W0."""
        for p in (self.w, self.b):
            p.trainable = False
            p.tensor.requires_grad = False
        a = Parameter(f"{self.name}.lora_a",
                      Tensor(rng.normal(0.0, 1.0 / np.sqrt(self.n_in), (self.n_in, rank))))
        b = Parameter(f"{self.name}.lora_b", Tensor(np.zeros((rank, self.n_out))))
        self.lora = LoRAAdapter(w0=self.w, a=a, b=b, rank=rank)

    def weight(self) -> Tensor:
        if self.lora is not None:
            return lora_effective_weight(self.lora)
        return self.w.tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight()), self.b.tensor)

    def parameters(self) -> List[Parameter]:
        out = [self.w, self.b]
        if self.lora is not None:
            out += [self.lora.a, self.lora.b]
        return out


class TrackParams:
    """One token kind's parameter set inside a transformer layer."""

    def __init__(self, name: str, d: int, mlp_ratio: int, rng: np.random.Generator,
                 init_std: float):
        self.q = Linear(f"{name}.q", d, d, rng, init_std)
        self.k = Linear(f"{name}.k", d, d, rng, init_std)
        self.v = Linear(f"{name}.v", d, d, rng, init_std)
        self.o = Linear(f"{name}.o", d, d, rng, init_std)
        self.mlp1 = Linear(f"{name}.mlp1", d, mlp_ratio * d, rng, init_std)
        self.mlp2 = Linear(f"{name}.mlp2", mlp_ratio * d, d, rng, init_std)
        self.ln1_g = Parameter(f"{name}.ln1.g", Tensor(np.ones(d)))
        self.ln1_b = Parameter(f"{name}.ln1.b", Tensor(np.zeros(d)))
        self.ln2_g = Parameter(f"{name}.ln2.g", Tensor(np.ones(d)))
        self.ln2_b = Parameter(f"{name}.ln2.b", Tensor(np.zeros(d)))

    def linears(self) -> List[Linear]:
        return [self.q, self.k, self.v, self.o, self.mlp1, self.mlp2]

    def parameters(self) -> List[Parameter]:
        out: List[Parameter] = []
        for lin in self.linears():
            out.extend(lin.parameters())
        out += [self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]
        return out

    def freeze_non_lora(self) -> None:
        for p in [self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]:
            p.trainable = False
            p.tensor.requires_grad = False


class DualParamLayer:
    """Pre-LN transformer layer with per-track parameters and joint attention.

    Token rows [0, n_split) of every batch element route through the patch
    track, the rest through the SG track; attention mixes all rows jointly.
    With no SG rows the layer takes a single-track path that is bitwise
    identical to a plain transformer layer using the patch parameters.
    """

    def __init__(self, name: str, d: int, heads: int, mlp_ratio: int,
                 rng: np.random.Generator, init_std: float, ln_style: str = "post"):
        self.d, self.heads = d, heads
        self.head_dim = d // heads
        self.patch = TrackParams(f"{name}.patch", d, mlp_ratio, rng, init_std)
        self.sg: Optional[TrackParams] = None
        self.name = name
        self.mlp_ratio = mlp_ratio
        self.ln_style = ln_style

    def _attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        b, t = q.shape[0], q.shape[1]
        q = ad.transpose(ad.reshape(q, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                          1.0 / np.sqrt(self.head_dim))
        attn = ad.softmax(scores, axis=-1)
        mixed = ad.matmul(attn, v)
        return ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, t, self.d))

    @staticmethod
    def _mlp_of(track: TrackParams):
        return lambda z: track.mlp2(ad.gelu(track.mlp1(z)))

    @staticmethod
    def _ln_of(g: Parameter, b: Parameter):
        return lambda z: ad.layer_norm(z, g.tensor, b.tensor)

    def _split_ln(self, x: Tensor, n_split: int, which: int) -> Tensor:
        pt, sg = self.patch, self.sg
        g1p, b1p = (pt.ln1_g, pt.ln1_b) if which == 1 else (pt.ln2_g, pt.ln2_b)
        if sg is None or n_split >= x.shape[1]:
            return self._ln_of(g1p, b1p)(x)
        g1s, b1s = (sg.ln1_g, sg.ln1_b) if which == 1 else (sg.ln2_g, sg.ln2_b)
        return ad.concat([self._ln_of(g1p, b1p)(x[:, :n_split]),
                          self._ln_of(g1s, b1s)(x[:, n_split:])], axis=1)

    def _split_attn(self, h: Tensor, n_split: int) -> Tensor:
        pt, sg = self.patch, self.sg
        if sg is None or n_split >= h.shape[1]:
            return pt.o(self._attend(pt.q(h), pt.k(h), pt.v(h)))
        ht, hb = h[:, :n_split], h[:, n_split:]
        q = ad.concat([pt.q(ht), sg.q(hb)], axis=1)
        k = ad.concat([pt.k(ht), sg.k(hb)], axis=1)
        v = ad.concat([pt.v(ht), sg.v(hb)], axis=1)
        mixed = self._attend(q, k, v)
        return ad.concat([pt.o(mixed[:, :n_split]), sg.o(mixed[:, n_split:])], axis=1)

    def _split_mlp(self, h: Tensor, n_split: int) -> Tensor:
        pt, sg = self.patch, self.sg
        if sg is None or n_split >= h.shape[1]:
            return self._mlp_of(pt)(h)
        return ad.concat([self._mlp_of(pt)(h[:, :n_split]),
                          self._mlp_of(sg)(h[:, n_split:])], axis=1)

    def __call__(self, x: Tensor, n_split: int) -> Tensor:
        if self.ln_style == "pre":
            x = ad.add(x, self._split_attn(self._split_ln(x, n_split, 1), n_split))
            x = ad.add(x, self._split_mlp(self._split_ln(x, n_split, 2), n_split))
            return x
        x = self._split_ln(ad.add(x, self._split_attn(x, n_split)), n_split, 1)
        x = self._split_ln(ad.add(x, self._split_mlp(x, n_split)), n_split, 2)
        return x

    def add_sg_track(self, rng: np.random.Generator, r_sg: int) -> None:
        """Clone the patch parameters as the frozen SG-track base, then
        attach LoRA factors of rank r_sg to the clones."""
        sg = TrackParams(f"{self.name}.sg", self.d, self.mlp_ratio, rng, 1.0)
        for src, dst in zip(self.patch.linears(), sg.linears()):
            dst.w.tensor.data = src.w.data.copy()
            dst.b.tensor.data = src.b.data.copy()
            dst.add_lora(r_sg, rng)
        for src, dst in [(self.patch.ln1_g, sg.ln1_g), (self.patch.ln1_b, sg.ln1_b),
                         (self.patch.ln2_g, sg.ln2_g), (self.patch.ln2_b, sg.ln2_b)]:
            dst.tensor.data = src.data.copy()
        sg.freeze_non_lora()
        self.sg = sg

    def parameters(self) -> List[Parameter]:
        out = self.patch.parameters()
        if self.sg is not None:
            out += self.sg.parameters()
        return out


@dataclass
class EncoderOutput:
    """Final token states of one image, split by token role."""

    cls_embedding: Tensor                       # (d,), unit norm
    patch_states: Tensor                        # (N, d)
    object_states: Optional[Tensor] = None      # (n_obj_tokens, d)
    relation_states: Optional[Tensor] = None    # (n_rel_tokens, d)


@dataclass
class BatchEncoderOutput:
    cls_embedding: Tensor                       # (B, d), unit-norm rows
    patch_states: Tensor                        # (B, N, d)
    object_states: Optional[Tensor] = None      # (B, n_obj_tokens, d)
    relation_states: Optional[Tensor] = None    # (B, n_rel_tokens, d)

    def single(self, i: int, d: int) -> EncoderOutput:
        return EncoderOutput(
            cls_embedding=ad.reshape(self.cls_embedding[i:i + 1], (d,)),
            patch_states=ad.reshape(self.patch_states[i:i + 1],
                                    self.patch_states.shape[1:]),
            object_states=None if self.object_states is None else ad.reshape(
                self.object_states[i:i + 1], self.object_states.shape[1:]),
            relation_states=None if self.relation_states is None else ad.reshape(
                self.relation_states[i:i + 1], self.relation_states.shape[1:]),
        )


class TextEncoder:
    def __init__(self, cfg: ModelConfig, vocab_size: int, rng: np.random.Generator):
        d, std = cfg.d, cfg.init_std
        self.cfg = cfg
        self.tok_embed = Parameter("text.tok_embed",
                                   Tensor(rng.normal(0.0, std / np.sqrt(d), (vocab_size, d))))
        self.pos_embed = Parameter("text.pos_embed",
                                   Tensor(rng.normal(0.0, std / np.sqrt(d), (cfg.max_length, d))))
        self.layers = [DualParamLayer(f"text.layers.{i}", d, cfg.heads, cfg.mlp_ratio,
                                      rng, std, cfg.ln_style)
                       for i in range(cfg.layers)]
        self.ln_f_g = Parameter("text.ln_f.g", Tensor(np.ones(d)))
        self.ln_f_b = Parameter("text.ln_f.b", Tensor(np.zeros(d)))
        self.proj = Linear("text.proj", d, d, rng, std)
        self.proj.w.tensor.data = np.eye(d)

    def encode_id_batch(self, ids: np.ndarray, prenorm: bool = False) -> Tensor:
        """(B, L) equal-length id rows -> (B, d) unit-norm CLS embeddings."""
        length = ids.shape[1]
        x = ad.add(ad.gather_rows(self.tok_embed.tensor, ids),
                   self.pos_embed.tensor[:length])
        for layer in self.layers:
            x = layer(x, n_split=length)
        cls = ad.layer_norm(x[:, 0:1, :], self.ln_f_g.tensor, self.ln_f_b.tensor)
        out = self.proj(ad.reshape(cls, (ids.shape[0], self.cfg.d)))
        if prenorm:
            return out
        return ad.normalize_rows(out)

    def parameters(self) -> List[Parameter]:
        out = [self.tok_embed, self.pos_embed]
        for layer in self.layers:
            out += layer.parameters()
        out += [self.ln_f_g, self.ln_f_b]
        out += self.proj.parameters()
        return out


class VisionEncoder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, std = cfg.d, cfg.init_std
        self.cfg = cfg
        self.patch_proj = Linear("vision.patch_proj", cfg.patch * cfg.patch * 3, d, rng, std)
        self.cls_token = Parameter("vision.cls_token",
                                   Tensor(rng.normal(0.0, std / np.sqrt(d), (1, d))))
        self.pos_embed = Parameter("vision.pos_embed",
                                   Tensor(rng.normal(0.0, std / np.sqrt(d),
                                                     (1 + cfg.n_patches, d))))
        self.layers = [DualParamLayer(f"vision.layers.{i}", d, cfg.heads, cfg.mlp_ratio,
                                      rng, std, cfg.ln_style)
                       for i in range(cfg.layers)]
        self.ln_f_g = Parameter("vision.ln_f.g", Tensor(np.ones(d)))
        self.ln_f_b = Parameter("vision.ln_f.b", Tensor(np.zeros(d)))
        self.proj = Linear("vision.proj", d, d, rng, std)
        self.proj.w.tensor.data = np.eye(d)
        self.obj_tokens: Optional[Parameter] = None
        self.rel_tokens: Optional[Parameter] = None
        self.ln_f_sg_g: Optional[Parameter] = None
        self.ln_f_sg_b: Optional[Parameter] = None

    def add_sg_tokens(self, rng: np.random.Generator, r_sg: int) -> None:
        cfg = self.cfg
        d = cfg.d
        self.obj_tokens = Parameter("vision.obj_tokens",
                                    Tensor(rng.normal(0.0, 1.0 / np.sqrt(d),
                                                      (cfg.n_obj_tokens, d))))
        self.rel_tokens = Parameter("vision.rel_tokens",
                                    Tensor(rng.normal(0.0, 1.0 / np.sqrt(d),
                                                      (cfg.n_rel_tokens, d))))
        self.ln_f_sg_g = Parameter("vision.ln_f_sg.g", Tensor(self.ln_f_g.data.copy()))
        self.ln_f_sg_b = Parameter("vision.ln_f_sg.b", Tensor(self.ln_f_b.data.copy()))
        for p in (self.ln_f_sg_g, self.ln_f_sg_b):
            p.trainable = False
            p.tensor.requires_grad = False
        for layer in self.layers:
            layer.add_sg_track(rng, r_sg)

    def _patch_rows(self, pixels: np.ndarray) -> np.ndarray:
        """(B, S, S, 3) uint8 -> (B, N, patch*patch*3) floats in [-1, 1]."""
        cfg = self.cfg
        b, h, w = pixels.shape[0], pixels.shape[1], pixels.shape[2]
        if h != cfg.image_size or w != cfg.image_size:
            raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} input "
                             f"(a multiple of patch {cfg.patch}), got {h}x{w}")
        p = cfg.patch
        x = pixels.astype(np.float64) / 255.0 * 2.0 - 1.0
        x = x.reshape(b, h // p, p, w // p, p, 3).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, cfg.n_patches, p * p * 3)

    def encode_batch(self, pixels: np.ndarray, include_sg: bool,
                     prenorm: bool = False) -> BatchEncoderOutput:
        cfg = self.cfg
        b = pixels.shape[0]
        patches = self.patch_proj(Tensor(self._patch_rows(pixels)))
        cls = ad.broadcast_to(ad.reshape(self.cls_token.tensor, (1, 1, cfg.d)),
                              (b, 1, cfg.d))
        z = ad.add(ad.concat([cls, patches], axis=1), self.pos_embed.tensor)
        n_split = 1 + cfg.n_patches
        if include_sg:
            if self.obj_tokens is None:
                raise ValueError("model has no SG tokens")
            bank = ad.concat([self.obj_tokens.tensor, self.rel_tokens.tensor], axis=0)
            n_bank = cfg.n_obj_tokens + cfg.n_rel_tokens
            bank = ad.broadcast_to(ad.reshape(bank, (1, n_bank, cfg.d)),
                                   (b, n_bank, cfg.d))
            z = ad.concat([z, bank], axis=1)
        for layer in self.layers:
            z = layer(z, n_split=n_split)
        cls_out = ad.layer_norm(z[:, 0:1, :], self.ln_f_g.tensor, self.ln_f_b.tensor)
        cls_out = self.proj(ad.reshape(cls_out, (b, cfg.d)))
        if not prenorm:
            cls_out = ad.normalize_rows(cls_out)
        out = BatchEncoderOutput(
            cls_embedding=cls_out,
            patch_states=z[:, 1:n_split],
        )
        if include_sg:
            sg = ad.layer_norm(z[:, n_split:], self.ln_f_sg_g.tensor, self.ln_f_sg_b.tensor)
            out.object_states = sg[:, :cfg.n_obj_tokens]
            out.relation_states = sg[:, cfg.n_obj_tokens:]
        return out

    def parameters(self) -> List[Parameter]:
        out = self.patch_proj.parameters() + [self.cls_token, self.pos_embed]
        for layer in self.layers:
            out += layer.parameters()
        out += [self.ln_f_g, self.ln_f_b]
        out += self.proj.parameters()
        for p in [self.obj_tokens, self.rel_tokens, self.ln_f_sg_g, self.ln_f_sg_b]:
            if p is not None:
                out.append(p)
        return out


class SGVLModel:
    """Base (stage-0) or finetune-wrapped (stage-1) dual encoder."""

    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer, seed: int = 0):
        if tokenizer.max_length != cfg.max_length:
            tokenizer = Tokenizer(tokenizer.words, max_length=cfg.max_length)
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.text = TextEncoder(cfg, len(tokenizer), rng)
        self.vision = VisionEncoder(cfg, rng)
        self.logit_scale = Parameter("logit_scale", Tensor(np.log(1.0 / 0.07)))
        self.head: Optional[PredictionHead] = None
        self.null_obj: Optional[Parameter] = None
        self.null_rel: Optional[Parameter] = None
        self.stage = 0
        self.has_sg_tokens = False

    # --- construction ---------------------------------------------------

    def enable_finetuning(self, use_sg_tokens: bool, seed: int = 0) -> None:
        """Freeze all pretrained weights, attach LoRA everywhere, and
        optionally add the SG prompt bank, heads and empty-class embeddings."""
        rng = np.random.default_rng(seed)
        cfg = self.cfg
        for p in self.parameters():
            p.trainable = False
            p.tensor.requires_grad = False
        for enc in (self.text, self.vision):
            for layer in enc.layers:
                for lin in layer.patch.linears():
                    lin.add_lora(cfg.r_p, rng)
        self.logit_scale.trainable = True
        self.logit_scale.tensor.requires_grad = True
        if use_sg_tokens:
            self.vision.add_sg_tokens(rng, cfg.r_sg)
            self.head = PredictionHead(cfg.d, rng, prefix="head")
            self.null_obj = Parameter("null.obj",
                                      Tensor(rng.normal(0.0, 1.0 / np.sqrt(cfg.d), (cfg.d,))))
            self.null_rel = Parameter("null.rel",
                                      Tensor(rng.normal(0.0, 1.0 / np.sqrt(cfg.d), (cfg.d,))))
            self.has_sg_tokens = True
        self.stage = 1

    # --- forward ----------------------------------------------------------

    def encode_text(self, caption: str) -> Tensor:
        """Unit-norm embedding of one caption (final CLS state)."""
        ids = self.tokenizer.encode(caption)
        out = self.text.encode_id_batch(ids[None, :])
        return ad.reshape(out, (self.cfg.d,))

    def encode_texts(self, captions: Sequence[str]) -> Tensor:
        """(B, d) caption embeddings; captions are grouped by token length
        so each group runs as one padded-free batch."""
        ids = [self.tokenizer.encode(c) for c in captions]
        groups: Dict[int, List[int]] = {}
        for i, row in enumerate(ids):
            groups.setdefault(len(row), []).append(i)
        rows: List[Optional[Tensor]] = [None] * len(captions)
        for length in sorted(groups):
            members = groups[length]
            batch = np.stack([ids[i] for i in members])
            out = self.text.encode_id_batch(batch)
            for j, i in enumerate(members):
                rows[i] = ad.reshape(out[j:j + 1], (self.cfg.d,))
        return ad.stack(rows, axis=0)

    def encode_image(self, pixels: np.ndarray,
                     include_sg: Optional[bool] = None) -> EncoderOutput:
        return self.encode_images(pixels[None], include_sg).single(0, self.cfg.d)

    def encode_images(self, pixels: np.ndarray,
                      include_sg: Optional[bool] = None) -> BatchEncoderOutput:
        if include_sg is None:
            include_sg = self.has_sg_tokens
        return self.vision.encode_batch(pixels, include_sg=include_sg)

    def embed_label_set(self, phrases: Sequence[str], kind: str) -> Tensor:
        """(n + 1, d) label matrix: text embeddings plus the learned empty row."""
        if any(not p for p in phrases):
            raise ValueError("label phrases must be non-empty")
        null = {"objects": self.null_obj, "relations": self.null_rel}[kind]
        if null is None:
            raise ValueError("model has no empty-class embeddings (enable SG tokens first)")
        null_row = ad.normalize_rows(ad.reshape(null.tensor, (1, -1)))
        if not phrases:
            return null_row
        return ad.concat([self.encode_texts(phrases), null_row], axis=0)

    def scale(self) -> Tensor:
        return ad.exp(self.logit_scale.tensor)

    def clamp_logit_scale(self) -> None:
        self.logit_scale.tensor.data = np.clip(self.logit_scale.data, 0.0, np.log(100.0))

    # --- parameter access ---------------------------------------------------

    def parameters(self) -> List[Parameter]:
        out = self.text.parameters() + self.vision.parameters() + [self.logit_scale]
        if self.head is not None:
            out += self.head.params
        for p in (self.null_obj, self.null_rel):
            if p is not None:
                out.append(p)
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter names")
        return out

    def trainable_parameter_fraction(self) -> float:
        params = self.parameters()
        total = sum(p.data.size for p in params)
        trainable = sum(p.data.size for p in params if p.trainable)
        return trainable / total

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.zero_grad()

    # --- persistence -----------------------------------------------------------

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def checkpoint_config(self) -> dict:
        return {
            "model": self.cfg.to_dict(),
            "tokenizer": self.tokenizer.to_dict(),
            "stage": self.stage,
            "use_sg_tokens": self.has_sg_tokens,
        }

    def save(self, path: Union[str, Path]) -> None:
        ad.save_checkpoint(path, self.state_arrays(), self.checkpoint_config())

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)[:4]} "
                             f"extra={sorted(extra)[:4]}")
        for name, value in arrays.items():
            if params[name].data.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}")
            params[name].tensor.data = value.copy()

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SGVLModel":
        arrays, config = ad.load_checkpoint(path)
        cfg = ModelConfig.from_dict(config["model"])
        tokenizer = Tokenizer.from_dict(config["tokenizer"])
        model = cls(cfg, tokenizer, seed=0)
        if config["stage"] == 1:
            model.enable_finetuning(use_sg_tokens=config["use_sg_tokens"], seed=0)
        model.load_arrays(arrays)
        return model

    @classmethod
    def finetune_from(cls, base_path: Union[str, Path], use_sg_tokens: bool,
                      seed: int = 0) -> "SGVLModel":
        """Build a stage-1 model around a stage-0 checkpoint."""
        arrays, config = ad.load_checkpoint(base_path)
        if config["stage"] != 0:
            raise ValueError("finetune_from requires a stage-0 checkpoint")
        cfg = ModelConfig.from_dict(config["model"])
        tokenizer = Tokenizer.from_dict(config["tokenizer"])
        model = cls(cfg, tokenizer, seed=seed)
        model.load_arrays(arrays)
        model.enable_finetuning(use_sg_tokens=use_sg_tokens, seed=seed)
        return model


def _zca(states: np.ndarray, eps_frac: float = 1e-2) -> Tuple[np.ndarray, np.ndarray]:
    """Whitening matrix and bias for a (N, d) sample of embeddings."""
    mu = states.mean(axis=0)
    centered = states - mu
    cov = centered.T @ centered / max(1, states.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    floor = eps_frac * evals.mean()
    w = evecs @ np.diag(1.0 / np.sqrt(np.maximum(evals, floor))) @ evecs.T
    return w, -mu @ w


def whiten_embedding_init(model: "SGVLModel", probe_pixels: np.ndarray,
                          probe_captions: Sequence[str], batch: int = 128) -> None:
    """Data-dependent whitening of the output projections at initialization.

    A randomly initialized encoder maps every input into a narrow
    anisotropic cone, so comparisons between near-duplicate inputs are
    dominated by the shared component rather than by their differences.
    Setting each final projection to the ZCA transform of a probe set's
    embedding statistics makes the initial embedding cloud zero-mean and
    isotropic, so an untrained model ranks like a random scorer. The
    projections remain ordinary trainable weights afterwards.
    """
    states = []
    for i in range(0, probe_pixels.shape[0], batch):
        out = model.vision.encode_batch(probe_pixels[i:i + batch],
                                        include_sg=False, prenorm=True)
        states.append(out.cls_embedding.data)
    w, b = _zca(np.concatenate(states))
    model.vision.proj.w.tensor.data = w
    model.vision.proj.b.tensor.data = b

    ids = [model.tokenizer.encode(c) for c in probe_captions]
    groups: Dict[int, List[np.ndarray]] = {}
    for row in ids:
        groups.setdefault(len(row), []).append(row)
    states = []
    for rows in groups.values():
        states.append(model.text.encode_id_batch(np.stack(rows), prenorm=True).data)
    w, b = _zca(np.concatenate(states))
    model.text.proj.w.tensor.data = w
    model.text.proj.b.tensor.data = b


def resize_nearest(pixels: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor resize to size x size; deterministic index mapping."""
    h, w = pixels.shape[:2]
    rows = np.minimum((np.arange(size) * h) // size, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(size) * w) // size, w - 1).astype(np.int64)
    return pixels[rows][:, cols]


def prepare_pixels(pixels: np.ndarray, image_size: int) -> np.ndarray:
    if pixels.shape[0] == image_size and pixels.shape[1] == image_size:
        return pixels
    return resize_nearest(pixels, image_size)
