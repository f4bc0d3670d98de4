"""The patient-level survival model and its training loop.

Per sub-WSI the pipeline is: linear feature reduction, a window-attention
layer with Manhattan-distance bias (local interactions), and a shuffled
window-attention layer (slide-wide interactions). All sub-WSI outputs of
a patient are concatenated and attention-pooled; a linear head emits one
logit per survival interval, squashed to conditional hazards.

The discrete-time likelihood loss, a hand-rolled AdamW loop with early
stopping, the checkpoint container, and the attention-export procedure
live here too.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import survstats
from .bagio import PatientRecord
from .blocks import (
    AttnPoolParams,
    BucketParams,
    RelPosBiasTable,
    WindowBlockParams,
    attn_pool,
    attn_pool_backward,
    local_window_attention,
    local_window_attention_backward,
    manhattan_bucket_index,
    manhattan_bias_backward,
    shuffle_window_attention,
    shuffle_window_attention_backward,
)
from .errors import FormatError, NumericError, ValidationError
from .numerics import ParamStore, linear, linear_backward, sigmoid
from .rearrange import RearrangedBag, SubWsiBag, knn_rearrange, random_window_mask
from .seeding import derive_seed, rng_for

CHECKPOINT_MAGIC = b"HVTC"
CHECKPOINT_VERSION = 1

LOG_FLOOR = 1e-12

EVAL_MASK_SEED = 0


@dataclass
class HVTSurvConfig:
    input_dim: int = 1024
    model_dim: int = 512
    window_size: int = 49
    n_heads: int = 8
    n_sub_wsis: int = 2
    n_intervals: int = 4
    pool_hidden: int = 0          # 0 means model_dim // 2
    ffn_ratio: int = 4
    bucket: BucketParams = field(default_factory=BucketParams)
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    patience: int = 8
    batch_size: int = 1
    max_epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.pool_hidden == 0:
            self.pool_hidden = self.model_dim // 2
        positive = (
            "input_dim", "model_dim", "window_size", "n_heads", "n_sub_wsis",
            "n_intervals", "pool_hidden", "ffn_ratio", "patience", "batch_size",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.n_heads:
            raise ValidationError(
                f"model_dim {self.model_dim} not divisible by {self.n_heads} heads"
            )
        if self.max_epochs < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ValidationError("training hyperparameters must be non-negative")


@dataclass
class HazardOutput:
    """Per-interval conditional hazards, survival curve and risk scalar."""

    hazards: np.ndarray
    survival: np.ndarray
    risk: float


@dataclass
class AttentionEntry:
    """One window's per-head attention, tagged with row provenance."""

    wsi_id: str
    matrix: np.ndarray        # (heads, w, w), each head row-stochastic
    source_rows: np.ndarray   # (w,) original patch index per attention row
    coords: np.ndarray        # (w, 2) scaled grid coordinates per row


@dataclass
class AttentionRecord:
    local: list[AttentionEntry]
    shuffle: list[AttentionEntry]
    pool_weights: np.ndarray
    pool_wsi: list[str]
    pool_source_rows: np.ndarray
    pool_coords: np.ndarray


def init_params(cfg: HVTSurvConfig, seed: int, scale: float = 0.02) -> ParamStore:
    """Fresh parameter store with all learnable weights registered.

    ``scale`` is the weight-init standard deviation. Training uses the
    small default; gradient checks pass a larger value so the attention
    starts away from its uniform saddle and no gradient element sits
    below the finite-difference noise floor.
    """
    rng = rng_for(seed, "init")
    store = ParamStore()
    store.add("reduce.weight", rng.normal(scale=scale, size=(cfg.input_dim, cfg.model_dim)))
    store.add("reduce.bias", np.zeros(cfg.model_dim))
    for prefix in ("local", "shuffle"):
        block = WindowBlockParams.init(cfg.model_dim, cfg.n_heads, rng, cfg.ffn_ratio)
        for name in block.array_fields():
            value = getattr(block, name)
            if name.startswith(("wq", "wk", "wv", "wo", "ffn_w")):
                value = value * (scale / 0.02)
            store.add(f"{prefix}.{name}", value)
    store.add("local.bias_table",
              rng.normal(scale=scale, size=(cfg.bucket.table_rows, cfg.n_heads)))
    store.add("pool.V", rng.normal(scale=scale, size=(cfg.pool_hidden, cfg.model_dim)))
    store.add("pool.U", rng.normal(scale=scale, size=(1, cfg.pool_hidden)))
    store.add("head.weight", rng.normal(scale=scale, size=(cfg.model_dim, cfg.n_intervals)))
    store.add("head.bias", np.zeros(cfg.n_intervals))
    return store


def _block_view(store: ParamStore, prefix: str, n_heads: int) -> WindowBlockParams:
    names = [f.name for f in fields(WindowBlockParams) if f.name != "n_heads"]
    return WindowBlockParams(**{n: store[f"{prefix}.{n}"] for n in names}, n_heads=n_heads)


def preprocess_patient(record: PatientRecord, cfg: HVTSurvConfig, mask_seed: int,
                       rearranged_cache: dict | None = None) -> list[SubWsiBag]:
    """Rearrange every WSI of a patient and split it into sub-WSI bags.

    The per-WSI mask seed is derived from the WSI id, so the split does
    not depend on the order the patient's slides are listed in. A slide
    with fewer windows than n_sub_wsis is split into as many sub-bags as
    it has windows.
    """
    subs: list[SubWsiBag] = []
    for bag in record.bags:
        reb: RearrangedBag | None = None
        if rearranged_cache is not None:
            reb = rearranged_cache.get(bag.wsi_id)
        if reb is None:
            reb = knn_rearrange(bag, cfg.window_size)
            if rearranged_cache is not None:
                rearranged_cache[bag.wsi_id] = reb
        m = min(cfg.n_sub_wsis, reb.n_windows)
        subs.extend(random_window_mask(reb, m, derive_seed(mask_seed, f"wsi:{bag.wsi_id}")))
    return subs


def survival_from_hazards(hazards: np.ndarray) -> np.ndarray:
    """S(k) as the running product of (1 - hazard) over intervals."""
    h = np.asarray(hazards, dtype=np.float64)
    if np.any(h < 0) or np.any(h > 1):
        raise ValidationError("hazards must lie in [0, 1]")
    return np.cumprod(1.0 - h)


def forward(sub_bags: list[SubWsiBag], params: ParamStore, cfg: HVTSurvConfig,
            want_attention: bool = False, return_state: bool = False):
    """Run a preprocessed patient through the model.

    Returns a HazardOutput, optionally paired with an AttentionRecord
    and/or the internal state needed for the backward pass.
    """
    if not sub_bags:
        raise ValidationError("patient has no sub-WSI bags")
    w = cfg.window_size
    local_params = _block_view(params, "local", cfg.n_heads)
    shuffle_params = _block_view(params, "shuffle", cfg.n_heads)
    table = RelPosBiasTable(table=params["local.bias_table"])
    pool_params = AttnPoolParams(U=params["pool.U"], V=params["pool.V"])

    per_bag_states = []
    outputs = []
    attn_local: list[AttentionEntry] = []
    attn_shuffle: list[AttentionEntry] = []
    for sub in sub_bags:
        x = np.asarray(sub.features, dtype=np.float64)
        if x.shape[0] % w:
            raise ValidationError("sub-WSI row count is not a multiple of the window size")
        h0 = linear(x, params["reduce.weight"], params["reduce.bias"])

        h1 = np.empty_like(h0)
        window_states = []
        for k in range(x.shape[0] // w):
            sl = slice(k * w, (k + 1) * w)
            coords = sub.scaled_coords[sl]
            idx = manhattan_bucket_index(coords, cfg.bucket)
            bias = table.table[idx].transpose(2, 0, 1)
            h1[sl], st = local_window_attention(h0[sl], local_params, bias,
                                                return_state=True)
            window_states.append((sl, idx, st))
            if want_attention:
                attn_local.append(AttentionEntry(
                    wsi_id=sub.source_wsi, matrix=st["attn"],
                    source_rows=sub.source_rows[sl], coords=coords,
                ))

        h2, shuffle_state = shuffle_window_attention(h1, shuffle_params, w,
                                                     return_state=True)
        if want_attention:
            perm = shuffle_state["perm"]
            for k, st in enumerate(shuffle_state["states"]):
                pos = perm[k * w : (k + 1) * w]
                attn_shuffle.append(AttentionEntry(
                    wsi_id=sub.source_wsi, matrix=st["attn"],
                    source_rows=sub.source_rows[pos],
                    coords=sub.scaled_coords[pos],
                ))
        outputs.append(h2)
        per_bag_states.append(dict(x=x, h0=h0, windows=window_states,
                                   shuffle=shuffle_state))

    h_cat = np.vstack(outputs)
    pooled, weights, pool_state = attn_pool(h_cat, pool_params, return_state=True)
    logits = pooled @ params["head.weight"] + params["head.bias"]
    hazards = sigmoid(logits)
    survival = survival_from_hazards(hazards)
    out = HazardOutput(hazards=hazards, survival=survival, risk=float(-survival.sum()))

    record = None
    if want_attention:
        record = AttentionRecord(
            local=attn_local,
            shuffle=attn_shuffle,
            pool_weights=weights,
            pool_wsi=[sub.source_wsi for sub in sub_bags for _ in range(len(sub.source_rows))],
            pool_source_rows=np.concatenate([sub.source_rows for sub in sub_bags]),
            pool_coords=np.vstack([sub.scaled_coords for sub in sub_bags]),
        )
    if not return_state:
        return (out, record) if want_attention else out
    state = dict(bags=per_bag_states, pool=pool_state, pooled=pooled,
                 hazards=hazards, sizes=[o.shape[0] for o in outputs])
    return (out, record, state) if want_attention else (out, state)


def nll_loss(out: HazardOutput, label: int, censored: int) -> float:
    """Discrete-time negative log likelihood with floored logs.

    Censored patients pay -log S(k); uncensored ones pay
    -log S(k-1) - log h(k), with S(-1) taken as 1.
    """
    n = out.hazards.shape[0]
    if not 0 <= label < n:
        raise ValidationError(f"interval label {label} outside [0, {n})")
    s_prev = out.survival[label - 1] if label > 0 else 1.0
    if censored:
        return float(-np.log(max(out.survival[label], LOG_FLOOR)))
    return float(-np.log(max(s_prev, LOG_FLOOR)) - np.log(max(out.hazards[label], LOG_FLOOR)))


def _nll_grad_logits(hazards: np.ndarray, label: int, censored: int) -> np.ndarray:
    """d(loss)/d(logits) for sigmoid hazards; clamped terms contribute 0."""
    n = hazards.shape[0]
    grad = np.zeros(n)
    upto = label if censored else label - 1
    for s in range(0, upto + 1):
        if 1.0 - hazards[s] > LOG_FLOOR:
            grad[s] = hazards[s]
    if not censored and hazards[label] > LOG_FLOOR:
        grad[label] += -(1.0 - hazards[label])
    return grad


def loss_and_grads(sub_bags: list[SubWsiBag], label: int, censored: int,
                   params: ParamStore, cfg: HVTSurvConfig) -> float:
    """Forward plus hand-chained backward; accumulates into params' grads."""
    out, state = forward(sub_bags, params, cfg, return_state=True)
    loss = nll_loss(out, label, censored)
    d_logits = _nll_grad_logits(state["hazards"], label, censored)

    pooled = state["pooled"]
    params.add_grad("head.weight", np.outer(pooled, d_logits))
    params.add_grad("head.bias", d_logits)
    g_pooled = params["head.weight"] @ d_logits

    pool_params = AttnPoolParams(U=params["pool.U"], V=params["pool.V"])
    g_cat, pool_grads = attn_pool_backward(g_pooled, state["pool"], pool_params)
    params.add_grad("pool.U", pool_grads["U"])
    params.add_grad("pool.V", pool_grads["V"])

    local_params = _block_view(params, "local", cfg.n_heads)
    shuffle_params = _block_view(params, "shuffle", cfg.n_heads)
    offset = 0
    for bag_state, size in zip(state["bags"], state["sizes"]):
        g_h2 = g_cat[offset : offset + size]
        offset += size

        g_h1, sh_grads = shuffle_window_attention_backward(g_h2, bag_state["shuffle"],
                                                           shuffle_params)
        for name, g in sh_grads.items():
            params.add_grad(f"shuffle.{name}", g)

        g_h0 = np.empty_like(g_h1)
        table_grad = np.zeros_like(params["local.bias_table"])
        for sl, idx, st in bag_state["windows"]:
            g_h0[sl], grads, g_bias = local_window_attention_backward(g_h1[sl], st,
                                                                      local_params)
            for name, g in grads.items():
                params.add_grad(f"local.{name}", g)
            table_grad += manhattan_bias_backward(g_bias, idx,
                                                  params["local.bias_table"].shape)
        params.add_grad("local.bias_table", table_grad)

        _, g_w, g_b = linear_backward(g_h0, bag_state["x"], params["reduce.weight"])
        params.add_grad("reduce.weight", g_w)
        params.add_grad("reduce.bias", g_b)
    return loss


class AdamW:
    """Adam with decoupled weight decay, applied in place."""

    def __init__(self, params: ParamStore, lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n]) for n in params.names()}
        self.v = {n: np.zeros_like(params[n]) for n in params.names()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in self.params.names():
            g = self.params.grad(name)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p = self.params[name]
            p -= self.lr * (update + self.weight_decay * p)


@dataclass
class FitResult:
    params: ParamStore
    history: list[dict]
    best_epoch: int


def _risk_predictions(records, indices, params, cfg, cache) -> list:
    preds = []
    for i in indices:
        rec = records[i]
        sub = preprocess_patient(rec, cfg, EVAL_MASK_SEED, cache)
        out = forward(sub, params, cfg)
        preds.append(survstats.RiskPrediction(
            patient_id=rec.patient_id, risk=out.risk,
            time_months=rec.follow_up.time_months,
            censored=rec.follow_up.censored,
        ))
    return preds


def fit(records: list[PatientRecord], train_idx, val_idx, cfg: HVTSurvConfig,
        seed: int) -> FitResult:
    """Train with AdamW (batch size 1) and early stopping on validation loss.

    Window masking is resampled every epoch for training patients and
    pinned to the evaluation seed for validation. Deterministic for a
    fixed seed and cohort.
    """
    train_idx = list(train_idx)
    val_idx = list(val_idx)
    if not train_idx or not val_idx:
        raise ValidationError("need non-empty train and validation splits")
    for i in (*train_idx, *val_idx):
        if records[i].interval_label is None:
            raise ValidationError(f"record {records[i].patient_id} has no interval label")

    params = init_params(cfg, derive_seed(seed, "fit-init"))
    optimizer = AdamW(params, cfg.learning_rate, cfg.weight_decay)
    cache: dict[str, RearrangedBag] = {}

    best = FitResult(params=params.copy(), history=[], best_epoch=0)
    best_val = np.inf
    stale = 0
    history: list[dict] = []
    for epoch in range(cfg.max_epochs):
        order = rng_for(seed, f"epoch-order:{epoch}").permutation(train_idx)
        train_losses = []
        for i in order:
            rec = records[int(i)]
            mask_seed = derive_seed(seed, f"mask:{epoch}:{rec.patient_id}")
            sub = preprocess_patient(rec, cfg, mask_seed, cache)
            params.zero_grads()
            loss = loss_and_grads(sub, rec.interval_label, rec.follow_up.censored,
                                  params, cfg)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}, "
                                   f"patient {rec.patient_id}")
            optimizer.step()
            train_losses.append(loss)

        val_losses = []
        for i in val_idx:
            rec = records[i]
            sub = preprocess_patient(rec, cfg, EVAL_MASK_SEED, cache)
            out = forward(sub, params, cfg)
            val_losses.append(nll_loss(out, rec.interval_label, rec.follow_up.censored))
        val_loss = float(np.mean(val_losses))
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        try:
            val_ci = survstats.c_index(_risk_predictions(records, val_idx, params,
                                                         cfg, cache))
        except Exception:
            val_ci = float("nan")
        history.append(dict(epoch=epoch, train_loss=float(np.mean(train_losses)),
                            val_loss=val_loss, val_cindex=val_ci))

        if val_loss < best_val:
            best_val = val_loss
            best = FitResult(params=params.copy(), history=history, best_epoch=epoch)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    best.history = history
    return best


def export_attention(record: AttentionRecord, drop_fraction: float = 0.8) -> dict:
    """Per-layer patch scores ready for heatmap rendering.

    Window attention is averaged over heads and then over the query axis
    to score each patch row; per layer, the lowest ``drop_fraction`` of
    scores are zeroed and the rest min-max rescaled to [0, 1] (a constant
    score vector rescales to all zeros). Shuffle-layer rows were tagged
    with their pre-shuffle identity at capture time, which realizes the
    inverse-permutation restore.
    """
    if not 0.0 <= drop_fraction < 1.0:
        raise ValidationError(f"drop_fraction must lie in [0, 1), got {drop_fraction}")

    def finalize(scores: np.ndarray) -> np.ndarray:
        scores = scores.astype(np.float64).copy()
        n_drop = int(np.floor(drop_fraction * scores.size))
        if n_drop:
            scores[np.argsort(scores, kind="stable")[:n_drop]] = 0.0
        span = scores.max() - scores.min()
        if span <= 0:
            return np.zeros_like(scores)
        return (scores - scores.min()) / span

    layers: dict[str, list[dict]] = {}
    for name, entries in (("local", record.local), ("shuffle", record.shuffle)):
        rows = []
        raw = []
        for entry in entries:
            per_patch = entry.matrix.mean(axis=0).mean(axis=0)
            for j in range(per_patch.shape[0]):
                rows.append(dict(wsi_id=entry.wsi_id,
                                 patch_index=int(entry.source_rows[j]),
                                 gx=int(entry.coords[j, 0]),
                                 gy=int(entry.coords[j, 1])))
                raw.append(per_patch[j])
        final = finalize(np.array(raw)) if raw else np.empty(0)
        for row, score in zip(rows, final):
            row["score"] = float(score)
        layers[name] = rows

    pool_final = finalize(record.pool_weights)
    layers["pool"] = [
        dict(wsi_id=record.pool_wsi[j],
             patch_index=int(record.pool_source_rows[j]),
             gx=int(record.pool_coords[j, 0]),
             gy=int(record.pool_coords[j, 1]),
             score=float(pool_final[j]))
        for j in range(record.pool_weights.shape[0])
    ]
    return layers


def _config_to_text(cfg: HVTSurvConfig, extra: dict | None = None) -> str:
    items = {
        "input_dim": cfg.input_dim, "model_dim": cfg.model_dim,
        "window_size": cfg.window_size, "n_heads": cfg.n_heads,
        "n_sub_wsis": cfg.n_sub_wsis, "n_intervals": cfg.n_intervals,
        "pool_hidden": cfg.pool_hidden, "ffn_ratio": cfg.ffn_ratio,
        "bucket_alpha": cfg.bucket.alpha, "bucket_beta": cfg.bucket.beta,
        "bucket_gamma": cfg.bucket.gamma, "bucket_lambda": cfg.bucket.lam,
        "learning_rate": cfg.learning_rate, "weight_decay": cfg.weight_decay,
        "patience": cfg.patience, "batch_size": cfg.batch_size,
        "max_epochs": cfg.max_epochs, "seed": cfg.seed,
    }
    if extra:
        items.update(extra)
    return "".join(f"{k}={v}\n" for k, v in items.items())


def _config_from_text(text: str) -> tuple[HVTSurvConfig, dict[str, str]]:
    raw: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    ints = ("input_dim", "model_dim", "window_size", "n_heads", "n_sub_wsis",
            "n_intervals", "pool_hidden", "ffn_ratio", "patience", "batch_size",
            "max_epochs", "seed")
    floats = ("learning_rate", "weight_decay")
    kwargs = {}
    extra = {}
    for key, value in raw.items():
        if key in ints:
            kwargs[key] = int(value)
        elif key in floats:
            kwargs[key] = float(value)
        elif key.startswith("bucket_"):
            continue
        else:
            extra[key] = value
    bucket = BucketParams(alpha=float(raw["bucket_alpha"]), beta=float(raw["bucket_beta"]),
                          gamma=float(raw["bucket_gamma"]), lam=int(raw["bucket_lambda"]))
    return HVTSurvConfig(bucket=bucket, **kwargs), extra


def save_checkpoint(path, params: ParamStore, cfg: HVTSurvConfig,
                    extra: dict | None = None) -> None:
    """Versioned binary container: config text plus named float32 tensors."""
    config_blob = _config_to_text(cfg, extra).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(config_blob)))
        fh.write(config_blob)
        names = params.names()
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            encoded = name.encode("utf-8")
            arr = params[name]
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, config, extra key-values)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, config_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    try:
        cfg, extra = _config_from_text(raw[offset : offset + config_len].decode("utf-8"))
        offset += config_len
        (n_params,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        store = ParamStore()
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            store.add(name, values.reshape(shape).astype(np.float64))
    except (struct.error, UnicodeDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return store, cfg, extra
