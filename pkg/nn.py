# nn.py
"""
numpy 实现的最小神经网络内核，全程 float64。

每个层在 forward 中缓存反向传播所需的中间量，backward 接收输出梯度、
把参数梯度累加到 self.grads 并返回输入梯度。张量约定为 (batch, 长度, d)。
"""
import io
import json
import logging
import struct
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config import CHECKPOINT_HEADER
from errors import NonFiniteError, PivotError, ShapeMismatchError

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)
_UINT64 = (1 << 64) - 1


def check_finite(array: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{what} 出现 NaN 或 Inf")
    return array


class Module:
    """参数容器基类：子模块通过属性赋值自动注册，参数名按层级用点号连接。"""

    def __init__(self):
        object.__setattr__(self, "_children", {})
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, child in enumerate(value):
                self._children[f"{name}.{i}"] = child
        object.__setattr__(self, name, value)

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, value
        for child_name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_grads(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self.grads.items():
            yield prefix + name, value
        for child_name, child in self._children.items():
            yield from child.named_grads(f"{prefix}{child_name}.")

    def parameters(self) -> Dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def gradients(self) -> Dict[str, np.ndarray]:
        return dict(self.named_grads())

    def zero_grad(self) -> None:
        for module in self.modules():
            for g in module.grads.values():
                g.fill(0.0)

    def train(self) -> "Module":
        for module in self.modules():
            module.training = True
        return self

    def eval(self) -> "Module":
        for module in self.modules():
            module.training = False
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.parameters()
        missing = set(own) - set(state)
        if missing:
            raise ShapeMismatchError(f"checkpoint 缺少参数: {sorted(missing)[:5]}")
        for name, value in own.items():
            if value.shape != state[name].shape:
                raise ShapeMismatchError(f"参数 {name} 形状不一致: {value.shape} vs {state[name].shape}")
            value[...] = state[name]

    def set_dropout_context(self, seed: int, step: int) -> None:
        for module in self.modules():
            if isinstance(module, Dropout):
                module.seed, module.step = seed, step

    def assign_dropout_ids(self) -> None:
        """按遍历顺序给每个 Dropout 编号，编号参与随机数密钥。"""
        for i, module in enumerate(m for m in self.modules() if isinstance(m, Dropout)):
            module.tensor_id = i

    def num_parameters(self) -> int:
        return sum(v.size for _, v in self.named_parameters())


InitMode = Literal["normal", "zeros"]


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 init: InitMode = "normal", scale: float = 1.0, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.bias = bias
        if init == "zeros":
            w = np.zeros((in_features, out_features))
        else:
            w = rng.normal(0.0, scale / np.sqrt(in_features), size=(in_features, out_features))
        self.add_param("W", w)
        if bias:
            self.add_param("b", np.zeros(out_features))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_features:
            raise ShapeMismatchError(f"Linear 期望最后一维为 {self.in_features}，实际为 {x.shape[-1]}")
        self._x = x
        y = x @ self.params["W"]
        return y + self.params["b"] if self.bias else y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.in_features)
        g2 = grad.reshape(-1, self.out_features)
        self.grads["W"] += x2.T @ g2
        if self.bias:
            self.grads["b"] += g2.sum(axis=0)
        return grad @ self.params["W"].T


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.add_param("gamma", np.ones(d))
        self.add_param("beta", np.zeros(d))

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self._inv = 1.0 / np.sqrt(var + LN_EPS)
        self._xhat = (x - mu) * self._inv
        return self.params["gamma"] * self._xhat + self.params["beta"]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        xhat, inv = self._xhat, self._inv
        d = xhat.shape[-1]
        self.grads["gamma"] += (grad * xhat).reshape(-1, d).sum(axis=0)
        self.grads["beta"] += grad.reshape(-1, d).sum(axis=0)
        dxhat = grad * self.params["gamma"]
        return inv / d * (d * dxhat
                          - dxhat.sum(axis=-1, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))


class GELU(Module):
    """tanh 近似的 GELU。"""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self._t)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, t = self._x, self._t
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return grad * (0.5 * (1.0 + t) + 0.5 * x * dt)


class Dropout(Module):
    """
    计数器式确定性 dropout：掩码由 Philox(seed, step, tensor_id) 生成，
    同一 (seed, step) 下重复前向得到同一掩码。
    """

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout 比例必须在 [0,1) 内，当前为 {rate}")
        self.rate = rate
        self.seed = 0
        self.step = 0
        self.tensor_id = 0
        self._mask = None

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed & _UINT64, ((self.step & 0xFFFFFFFF) << 32) | self.tensor_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        keep = self._generator().random(x.shape) >= self.rate
        self._mask = keep / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad if self._mask is None else grad * self._mask


def softmax(scores: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """最后一维上的数值稳定 softmax；mask 为 False 的位置概率为 0。"""
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, length, d = x.shape
    return x.reshape(b, length, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, length, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, length, h * dh)


def _key_mask(mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
    # (b, Lk) → 可广播到 (b, heads, Lq, Lk)
    return None if mask is None else mask[:, None, None, :]


def attention_forward(queries: np.ndarray, keys: np.ndarray, values: np.ndarray, heads: int,
                      mask: Optional[np.ndarray] = None, return_weights: bool = False):
    """
    多头缩放点积注意力（不含投影）。输入为 (b, L, d) 或 (L, d)，
    缩放因子 1/√(d/heads)，mask 形状 (b, Lk)，True 为有效键。
    """
    squeeze = queries.ndim == 2
    if squeeze:
        queries, keys, values = queries[None], keys[None], values[None]
        mask = None if mask is None else mask[None]
    d = queries.shape[-1]
    if d % heads != 0:
        raise ShapeMismatchError(f"heads={heads} 不能整除维度 {d}")
    if keys.shape[1] != values.shape[1]:
        raise ShapeMismatchError(f"键长 {keys.shape[1]} 与值长 {values.shape[1]} 不一致")
    if keys.shape[-1] != d or values.shape[-1] != d:
        raise ShapeMismatchError("查询、键、值的维度必须一致")

    qh, kh, vh = split_heads(queries, heads), split_heads(keys, heads), split_heads(values, heads)
    scale = 1.0 / np.sqrt(d // heads)
    weights = softmax(qh @ kh.transpose(0, 1, 3, 2) * scale, _key_mask(mask))
    out = check_finite(merge_heads(weights @ vh), "注意力输出")
    if squeeze:
        out, weights = out[0], weights[0]
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, init: InitMode = "normal"):
        super().__init__()
        if d % heads != 0:
            raise ShapeMismatchError(f"heads={heads} 不能整除 d={d}")
        self.d = d
        self.heads = heads
        self.scale = 1.0 / np.sqrt(d // heads)
        self.wq = Linear(d, d, rng, init)
        # 键投影不带偏置：softmax 对每行加常数不变，偏置梯度恒为 0
        self.wk = Linear(d, d, rng, init, bias=False)
        self.wv = Linear(d, d, rng, init)
        self.wo = Linear(d, d, rng, init)

    def forward(self, x: np.ndarray, source: Optional[np.ndarray] = None,
                mask: Optional[np.ndarray] = None) -> np.ndarray:
        self._self_attention = source is None
        source = x if source is None else source
        if source.shape[-1] != self.d:
            raise ShapeMismatchError(f"上下文维度 {source.shape[-1]} 与 d={self.d} 不一致")
        self._qh = split_heads(self.wq.forward(x), self.heads)
        self._kh = split_heads(self.wk.forward(source), self.heads)
        self._vh = split_heads(self.wv.forward(source), self.heads)
        self._p = softmax(self._qh @ self._kh.transpose(0, 1, 3, 2) * self.scale, _key_mask(mask))
        return self.wo.forward(merge_heads(self._p @ self._vh))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """返回 (对 x 的梯度, 对 source 的梯度)；自注意力时后者为 None 并已并入前者。"""
        d_o = split_heads(self.wo.backward(grad), self.heads)
        p = self._p
        d_p = d_o @ self._vh.transpose(0, 1, 3, 2)
        d_vh = p.transpose(0, 1, 3, 2) @ d_o
        d_s = p * (d_p - (d_p * p).sum(axis=-1, keepdims=True)) * self.scale
        d_qh = d_s @ self._kh
        d_kh = d_s.transpose(0, 1, 3, 2) @ self._qh
        dx = self.wq.backward(merge_heads(d_qh))
        dsource = self.wk.backward(merge_heads(d_kh)) + self.wv.backward(merge_heads(d_vh))
        if self._self_attention:
            return dx + dsource, None
        return dx, dsource


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng: np.random.Generator, init: InitMode = "normal"):
        super().__init__()
        self.fc1 = Linear(d, d * mult, rng, init)
        self.act = GELU()
        self.fc2 = Linear(d * mult, d, rng, init)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.fc1.backward(self.act.backward(self.fc2.backward(grad)))


class TransformerLayer(Module):
    """
    Pre-LN 层：自注意力 → 交叉注意力 → 前馈，每个子层外包残差连接。
      x1 = x  + Drop(SA(LN1(x)))
      x2 = x1 + Drop(CA(LN2(x1), context))
      y  = x2 + Drop(FFN(LN3(x2)))
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ffn_mult: int = 4,
                 dropout: float = 0.0, init: InitMode = "normal"):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng, init)
        self.drop1 = Dropout(dropout)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng, init)
        self.drop2 = Dropout(dropout)
        self.ln3 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult, rng, init)
        self.drop3 = Dropout(dropout)

    def forward(self, x: np.ndarray, context: np.ndarray, context_mask: Optional[np.ndarray] = None) -> np.ndarray:
        if x.shape[-1] != context.shape[-1]:
            raise ShapeMismatchError(f"输入维度 {x.shape[-1]} 与上下文维度 {context.shape[-1]} 不一致")
        x1 = x + self.drop1.forward(self.self_attn.forward(self.ln1.forward(x)))
        x2 = x1 + self.drop2.forward(self.cross_attn.forward(self.ln2.forward(x1), context, context_mask))
        y = x2 + self.drop3.forward(self.ffn.forward(self.ln3.forward(x2)))
        return check_finite(y, "Transformer 层输出")

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        g2 = grad + self.ln3.backward(self.ffn.backward(self.drop3.backward(grad)))
        d_query, d_context = self.cross_attn.backward(self.drop2.backward(g2))
        g1 = g2 + self.ln2.backward(d_query)
        d_sa, _ = self.self_attn.backward(self.drop1.backward(g1))
        dx = g1 + self.ln1.backward(d_sa)
        return dx, d_context


def layer_forward(layer: TransformerLayer, x: np.ndarray, context: np.ndarray,
                  context_mask: Optional[np.ndarray] = None) -> np.ndarray:
    return layer.forward(x, context, context_mask)


class TransformerStack(Module):
    """共享同一上下文的若干 TransformerLayer。"""

    def __init__(self, n_layers: int, d: int, heads: int, rng: np.random.Generator, ffn_mult: int = 4,
                 dropout: float = 0.0, init: InitMode = "normal"):
        super().__init__()
        if n_layers < 1:
            raise ValueError("层数至少为 1")
        self.layers = [TransformerLayer(d, heads, rng, ffn_mult, dropout, init) for _ in range(n_layers)]

    def forward(self, x: np.ndarray, context: np.ndarray, context_mask: Optional[np.ndarray] = None) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, context, context_mask)
        return x

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        d_context = None
        for layer in reversed(self.layers):
            grad, dc = layer.backward(grad)
            d_context = dc if d_context is None else d_context + dc
        return grad, d_context


class StateEmbedder(Module):
    """7 维机器人状态 → d 维：Linear → GELU → Linear。"""

    def __init__(self, d: int, rng: np.random.Generator, state_dim: int = 7):
        super().__init__()
        self.fc1 = Linear(state_dim, d, rng)
        self.act = GELU()
        self.fc2 = Linear(d, d, rng)

    def forward(self, states: np.ndarray) -> np.ndarray:
        return self.fc2.forward(self.act.forward(self.fc1.forward(states)))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.fc1.backward(self.act.backward(self.fc2.backward(grad)))


# --- 优化器 ---

class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: float = Field(gt=0.0)
    algorithm: Literal["sgd", "adam"] = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    def __init__(self):
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}


def optimizer_step(params: Dict[str, np.ndarray], gradients: Dict[str, np.ndarray], config: OptimizerConfig,
                   state: Optional[AdamState] = None) -> Dict[str, np.ndarray]:
    """
    返回更新后的参数（新数组，不修改输入）。
      sgd:  p ← p − lr·g
      adam: m ← β1·m + (1−β1)·g;  v ← β2·v + (1−β2)·g²;
            p ← p − lr·m̂/(√v̂ + eps)，m̂、v̂ 为偏差修正后的矩估计
    """
    for name, p in params.items():
        if name not in gradients or gradients[name].shape != p.shape:
            raise ShapeMismatchError(f"参数 {name} 与梯度形状不匹配")

    if config.algorithm == "sgd":
        return {name: p - config.lr * gradients[name] for name, p in params.items()}

    if state is None:
        state = AdamState()
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    updated = {}
    for name, p in params.items():
        g = gradients[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** state.t)
        v_hat = v / (1.0 - b2 ** state.t)
        updated[name] = p - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return updated


class Optimizer:
    """对一个 Module 原地执行 optimizer_step，可选全局梯度范数裁剪。"""

    def __init__(self, module: Module, config: OptimizerConfig, grad_clip: Optional[float] = None):
        self.module = module
        self.config = config
        self.grad_clip = grad_clip
        self.state = AdamState()

    def step(self) -> float:
        params = self.module.parameters()
        grads = self.module.gradients()
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        check_finite(np.array(norm), "梯度范数")
        if self.grad_clip and norm > self.grad_clip:
            grads = {k: g * (self.grad_clip / norm) for k, g in grads.items()}
        for name, value in optimizer_step(params, grads, self.config, self.state).items():
            params[name][...] = value
        return norm


# --- 有限差分梯度检查 ---

class GradCheckReport(BaseModel):
    max_error: float
    worst_parameter: str
    checked: int


def gradient_error(analytic: float, numeric: float) -> float:
    """相对误差 |a - n| / max(|a|, |n|, 1e-8)。"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def check_gradients(loss_fn: Callable[[], float], params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                    eps: float = 1e-5, max_per_param: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """
    用中心差分核对解析梯度。params 中的数组被原地扰动后恢复。
    max_per_param 限制每个参数抽查的元素个数；解析值与数值都恰为 0 的元素不计入。
    """
    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    for name, value in params.items():
        flat = value.reshape(-1)
        indices = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            indices = rng.choice(flat.size, size=max_per_param, replace=False)
        analytic = grads[name].reshape(-1)
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            plus = loss_fn()
            flat[i] = original - eps
            minus = loss_fn()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            if analytic[i] == 0.0 and numeric == 0.0:
                continue
            error = gradient_error(float(analytic[i]), numeric)
            checked += 1
            if error > worst:
                worst, worst_name = error, f"{name}[{i}]"
    return GradCheckReport(max_error=worst, worst_parameter=worst_name, checked=checked)


# --- checkpoint 文件 ---

def write_checkpoint(path: Union[str, Path], blocks: Dict[str, np.ndarray], metadata: Optional[dict] = None) -> None:
    """
    格式：版本头行、元数据 JSON 行，然后依次是参数块：
    u16 名字长度 | 名字 UTF-8 | u8 维数 | u32×维数 形状 | f64 小端数据。
    """
    buffer = io.BytesIO()
    buffer.write((CHECKPOINT_HEADER + "\n").encode("utf-8"))
    buffer.write((json.dumps(metadata or {}, ensure_ascii=False, sort_keys=True) + "\n").encode("utf-8"))
    for name, array in blocks.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array, dtype="<f8")
        buffer.write(struct.pack("<H", len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack("<B", array.ndim))
        buffer.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buffer.write(np.ascontiguousarray(array).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buffer.getvalue())
    logger.info(f"✅ checkpoint 已写出: {path} ({len(blocks)} 个参数块)")


def read_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    header_end = data.find(b"\n")
    if header_end < 0 or data[:header_end].decode("utf-8", "replace") != CHECKPOINT_HEADER:
        raise PivotError(f"不是有效的 checkpoint 文件（缺少 '{CHECKPOINT_HEADER}' 头）: {path}")
    meta_end = data.find(b"\n", header_end + 1)
    metadata = json.loads(data[header_end + 1:meta_end].decode("utf-8"))

    blocks: Dict[str, np.ndarray] = {}
    offset = meta_end + 1
    try:
        while offset < len(data):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            array = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
            offset += 8 * count
            blocks[name] = array.astype(np.float64)
    except (struct.error, ValueError) as e:
        raise PivotError(f"checkpoint 文件截断或损坏: {path}") from e
    return blocks, metadata


def module_tensors(module: Module) -> List[str]:
    return [name for name, _ in module.named_parameters()]
