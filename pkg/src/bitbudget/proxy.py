"""Desk-scale quality oracle: a tiny character transformer whose projection
weights live in the model-store format, plus perplexity-based plan scoring."""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .calibration import saliency
from .plans import QuantPlan, apply_plan
from .store import ModelStore

CHARSET = (
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "\n \"'(),-.:;?"
)
assert len(CHARSET) == 64

_CHAR_TO_ID = np.full(256, CHARSET.index(" "), dtype=np.int32)
for _i, _c in enumerate(CHARSET):
    _CHAR_TO_ID[ord(_c)] = _i


def encode(text: str) -> np.ndarray:
    """Bytes outside the 64-char vocabulary map to space."""
    raw = np.frombuffer(text.encode("ascii", errors="replace"), dtype=np.uint8)
    return _CHAR_TO_ID[raw]


def decode(ids: np.ndarray) -> str:
    return "".join(CHARSET[i] for i in ids)


def load_corpus() -> str:
    return (
        importlib.resources.files("bitbudget")
        .joinpath("data/corpus.txt")
        .read_text()
    )


def make_windows(tokens: np.ndarray, context: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping (inputs, next-char targets) windows of length `context`."""
    usable = (tokens.size - 1) // context * context
    if usable == 0:
        raise ValueError("token stream shorter than one context window")
    x = tokens[:usable].reshape(-1, context)
    y = tokens[1:usable + 1].reshape(-1, context)
    return x, y


class TrainingError(Exception):
    pass


@dataclass
class ProxyConfig:
    vocab: int = 64
    dim: int = 64
    hidden: int = 320
    layers: int = 2
    context: int = 32
    # training recipe; the bar trains well past basic convergence so that
    # low-bit damage lands in the reward's sensitive range
    batch_size: int = 48
    max_steps: int = 4000
    learning_rate: float = 2e-3
    eval_every: int = 50
    loss_bar_frac: float = 0.38


_PROJS = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.gate", "mlp.up", "mlp.down")


def _tensor_names(layers: int) -> list[str]:
    names = ["embed"]
    for i in range(layers):
        names += [f"layers.{i}.{p}" for p in _PROJS]
    names.append("output")
    return names


class ProxyModel:
    """Character-level next-token predictor over the store's weight matrices.

    Blocks: pre-norm single-head causal attention (q/k/v/o) and a gated MLP
    (gate/up/down), both with residual additions; RMS normalization is
    parameter-free so every learned weight is a plain dense matrix.
    """

    def __init__(self, cfg: ProxyConfig, tensors: dict[str, np.ndarray]):
        self.cfg = cfg
        self.tensors = tensors
        self._check_shapes()

    def _check_shapes(self) -> None:
        c = self.cfg
        expect: dict[str, tuple[int, int]] = {"embed": (c.vocab, c.dim), "output": (c.vocab, c.dim)}
        for i in range(c.layers):
            for p in ("attn.q", "attn.k", "attn.v", "attn.o"):
                expect[f"layers.{i}.{p}"] = (c.dim, c.dim)
            expect[f"layers.{i}.mlp.gate"] = (c.hidden, c.dim)
            expect[f"layers.{i}.mlp.up"] = (c.hidden, c.dim)
            expect[f"layers.{i}.mlp.down"] = (c.dim, c.hidden)
        for name, shape in expect.items():
            if name not in self.tensors:
                raise ValueError(f"proxy model missing tensor {name!r}")
            if tuple(self.tensors[name].shape) != shape:
                raise ValueError(
                    f"tensor {name!r} has shape {self.tensors[name].shape}, expected {shape}"
                )

    @classmethod
    def init_random(cls, cfg: ProxyConfig, seed: int) -> "ProxyModel":
        rng = np.random.default_rng([seed, 11])
        t: dict[str, np.ndarray] = {}
        t["embed"] = (0.08 * rng.standard_normal((cfg.vocab, cfg.dim))).astype(np.float32)
        resid = 1.0 / np.sqrt(2.0 * cfg.layers)
        for i in range(cfg.layers):
            for p in ("attn.q", "attn.k", "attn.v"):
                t[f"layers.{i}.{p}"] = (
                    rng.standard_normal((cfg.dim, cfg.dim)) / np.sqrt(cfg.dim)
                ).astype(np.float32)
            t[f"layers.{i}.attn.o"] = (
                resid * rng.standard_normal((cfg.dim, cfg.dim)) / np.sqrt(cfg.dim)
            ).astype(np.float32)
            t[f"layers.{i}.mlp.gate"] = (
                rng.standard_normal((cfg.hidden, cfg.dim)) / np.sqrt(cfg.dim)
            ).astype(np.float32)
            t[f"layers.{i}.mlp.up"] = (
                rng.standard_normal((cfg.hidden, cfg.dim)) / np.sqrt(cfg.dim)
            ).astype(np.float32)
            t[f"layers.{i}.mlp.down"] = (
                resid * rng.standard_normal((cfg.dim, cfg.hidden)) / np.sqrt(cfg.hidden)
            ).astype(np.float32)
        t["output"] = (0.02 * rng.standard_normal((cfg.vocab, cfg.dim))).astype(np.float32)
        return cls(cfg, t)

    @classmethod
    def from_store(cls, store: ModelStore, cfg: ProxyConfig | None = None) -> "ProxyModel":
        if cfg is None:
            vocab, dim = store.tensors["embed"].shape
            layer_ids = set()
            for name in store.names:
                if name.startswith("layers."):
                    layer_ids.add(int(name.split(".")[1]))
            hidden = store.tensors["layers.0.mlp.gate"].shape[0]
            cfg = ProxyConfig(vocab=vocab, dim=dim, hidden=hidden, layers=len(layer_ids))
        return cls(cfg, dict(store.tensors))

    def to_store(self) -> ModelStore:
        store = ModelStore()
        for name in _tensor_names(self.cfg.layers):
            store.add(name, self.tensors[name])
        return store

    def quantizable_names(self) -> list[str]:
        return [n for n in _tensor_names(self.cfg.layers) if ".attn." in n or ".mlp." in n]

    # ---- numpy inference -------------------------------------------------

    @staticmethod
    def _rms(x: np.ndarray) -> np.ndarray:
        return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + 1e-6)

    def _forward(self, tokens: np.ndarray, record=None) -> np.ndarray:
        """Logits (B, T, V); `record(name, rows)` sees each projection input."""
        c = self.cfg
        t = {k: v.astype(np.float64) for k, v in self.tensors.items()}
        x = t["embed"][tokens]
        T = tokens.shape[1]
        causal = np.triu(np.full((T, T), -1e9), k=1)
        for i in range(c.layers):
            pre = f"layers.{i}."
            a = self._rms(x)
            if record is not None:
                rows = a.reshape(-1, c.dim)
                for p in ("attn.q", "attn.k", "attn.v"):
                    record(pre + p, rows)
            q = a @ t[pre + "attn.q"].T
            k = a @ t[pre + "attn.k"].T
            v = a @ t[pre + "attn.v"].T
            scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(c.dim) + causal
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            att = e / e.sum(axis=-1, keepdims=True)
            ctx = att @ v
            if record is not None:
                record(pre + "attn.o", ctx.reshape(-1, c.dim))
            x = x + ctx @ t[pre + "attn.o"].T
            m = self._rms(x)
            if record is not None:
                rows = m.reshape(-1, c.dim)
                record(pre + "mlp.gate", rows)
                record(pre + "mlp.up", rows)
            g_pre = m @ t[pre + "mlp.gate"].T
            g = g_pre / (1.0 + np.exp(-g_pre))
            u = m @ t[pre + "mlp.up"].T
            hidden = g * u
            if record is not None:
                record(pre + "mlp.down", hidden.reshape(-1, c.hidden))
            x = x + hidden @ t[pre + "mlp.down"].T
        h = self._rms(x)
        return h @ t["output"].T

    def loss_on(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        """Mean cross-entropy in nats over all positions."""
        logits = self._forward(inputs)
        flat = logits.reshape(-1, self.cfg.vocab)
        z = flat - flat.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1))
        picked = z[np.arange(flat.shape[0]), targets.ravel()]
        return float(np.mean(lse - picked))

    def calibration_pass(self, tokens: np.ndarray) -> dict[str, tuple[np.ndarray, int]]:
        """Accumulated |input activation| per input channel of each projection."""
        sums: dict[str, tuple[np.ndarray, int]] = {}

        def record(name: str, rows: np.ndarray) -> None:
            acc = np.abs(rows).sum(axis=0)
            if name in sums:
                prev, count = sums[name]
                sums[name] = (prev + acc, count + rows.shape[0])
            else:
                sums[name] = (acc, rows.shape[0])

        self._forward(tokens, record=record)
        return sums

    # ---- differentiable training graph ------------------------------------

    def _graph_params(self) -> dict[str, ad.Tensor]:
        return {name: ad.param(self.tensors[name].astype(np.float32))
                for name in _tensor_names(self.cfg.layers)}

    @staticmethod
    def _graph_forward(cfg: ProxyConfig, p: dict[str, ad.Tensor], tokens: np.ndarray) -> ad.Tensor:
        T = tokens.shape[1]
        causal = np.triu(np.full((T, T), -1e9, dtype=np.float32), k=1)
        x = ad.gather_rows(p["embed"], tokens)
        for i in range(cfg.layers):
            pre = f"layers.{i}."
            a = ad.rms_norm(x)
            q = ad.matmul(a, ad.transpose(p[pre + "attn.q"]))
            k = ad.matmul(a, ad.transpose(p[pre + "attn.k"]))
            v = ad.matmul(a, ad.transpose(p[pre + "attn.v"]))
            scores = ad.add(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(cfg.dim)),
                            ad.const(causal))
            att = ad.softmax(scores)
            ctx = ad.matmul(att, v)
            x = ad.add(x, ad.matmul(ctx, ad.transpose(p[pre + "attn.o"])))
            m = ad.rms_norm(x)
            g = ad.silu(ad.matmul(m, ad.transpose(p[pre + "mlp.gate"])))
            u = ad.matmul(m, ad.transpose(p[pre + "mlp.up"]))
            x = ad.add(x, ad.matmul(ad.mul(g, u), ad.transpose(p[pre + "mlp.down"])))
        h = ad.rms_norm(x)
        return ad.matmul(h, ad.transpose(p["output"]))


def train_proxy(corpus: str, cfg: ProxyConfig, seed: int) -> tuple[ProxyModel, dict]:
    """Train until held-out loss < loss_bar_frac * ln(vocab) or the step cap.

    Returns (model, diagnostics). Deterministic for a fixed seed. Raises
    TrainingError when the bar is not reached within the cap.
    """
    if len(corpus) < 50_000:
        raise TrainingError(f"corpus too small: {len(corpus)} chars (need 50000)")
    tokens = encode(corpus)
    eval_len = 8192
    split = tokens.size - (eval_len + 1)
    train_tokens = tokens[:split]
    held_x, held_y = make_windows(tokens[split:], cfg.context)

    model = ProxyModel.init_random(cfg, seed)
    params = model._graph_params()
    order = _tensor_names(cfg.layers)
    adam = ad.Adam([params[n] for n in order], lr=cfg.learning_rate)
    rng = np.random.default_rng([seed, 13])
    bar = cfg.loss_bar_frac * np.log(cfg.vocab)
    max_start = train_tokens.size - cfg.context - 1

    def held_loss() -> float:
        for name in order:
            model.tensors[name] = params[name].data.astype(np.float32)
        return model.loss_on(held_x, held_y)

    history = []
    loss = held_loss()
    history.append((0, loss))
    step = 0
    while loss >= bar and step < cfg.max_steps:
        for _ in range(cfg.eval_every):
            step += 1
            starts = rng.integers(0, max_start, size=cfg.batch_size)
            xb = np.stack([train_tokens[s:s + cfg.context] for s in starts])
            yb = np.stack([train_tokens[s + 1:s + 1 + cfg.context] for s in starts])
            logits = ProxyModel._graph_forward(cfg, params, xb)
            flat = ad.reshape(logits, (-1, cfg.vocab))
            loss_t = ad.cross_entropy_mean(flat, yb.ravel())
            loss_t.backward()
            adam.step()
        loss = held_loss()
        history.append((step, loss))
    if loss >= bar:
        raise TrainingError(
            f"held-out loss {loss:.4f} never reached the bar {bar:.4f} "
            f"within {cfg.max_steps} steps; history tail: {history[-3:]}"
        )
    diag = {"steps": step, "held_out_loss": loss, "loss_bar": float(bar), "history": history}
    return model, diag


@dataclass
class ProxyMetrics:
    l0: float
    lq: float
    dl_rel: float
    ppl0: float
    pplq: float
    rho: float
    skip_frac: float
    avg_bits: float

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in (self.l0, self.lq, self.rho))

    def as_dict(self) -> dict:
        return {
            "l0": self.l0, "lq": self.lq, "dl_rel": self.dl_rel,
            "ppl0": self.ppl0, "pplq": self.pplq, "rho": self.rho,
            "skip_frac": self.skip_frac, "avg_bits": self.avg_bits,
        }


class QualityOracle:
    """Scores plans by perplexity ratio against a frozen baseline model."""

    def __init__(self, model: ProxyModel, eval_tokens: np.ndarray):
        self.model = model
        self.base_store = model.to_store()
        self.eval_x, self.eval_y = make_windows(eval_tokens, model.cfg.context)
        self.l0 = model.loss_on(self.eval_x, self.eval_y)

    def evaluate(self, plan: QuantPlan) -> ProxyMetrics:
        quantized = apply_plan(plan, self.base_store)
        qmodel = ProxyModel.from_store(quantized, self.model.cfg)
        lq = qmodel.loss_on(self.eval_x, self.eval_y)
        rho = float(np.exp(lq - self.l0))
        metrics = ProxyMetrics(
            l0=self.l0,
            lq=lq,
            dl_rel=(lq - self.l0) / self.l0,
            ppl0=float(np.exp(self.l0)),
            pplq=float(np.exp(lq)),
            rho=rho,
            skip_frac=plan.skip_frac,
            avg_bits=plan.avg_bits,
        )
        if not metrics.finite():
            raise ValueError("non-finite proxy metrics; episode must be discarded")
        return metrics


def evaluate_quality(model: ProxyModel, plan: QuantPlan, eval_tokens: np.ndarray) -> ProxyMetrics:
    return QualityOracle(model, eval_tokens).evaluate(plan)


def recon_surrogate(plan: QuantPlan, scales) -> float:
    """Saliency-weighted relative squared reconstruction error of a plan."""
    num = 0.0
    den = 0.0
    for e in plan.entries:
        if e.unit is None:
            raise ValueError("recon_surrogate needs units attached")
        w = e.unit.weights.astype(np.float64)
        sal = saliency(e.unit, scales)
        den += float((sal * w * w).sum())
        if e.decision.is_skip or e.recon is None:
            continue
        d = e.recon - w
        num += float((sal * d * d).sum())
    if den == 0.0:
        return 0.0
    return num / den
