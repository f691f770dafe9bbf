"""Named parameter storage shared by the codec and the classifiers.

Parameters live in a flat dotted-name map so checkpoints, weight adoption
and freeze bookkeeping can all operate on name sets. Construction order is
deterministic (insertion-ordered dict) so a fixed seed rebuilds bit-identical
initializations.
"""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .tensor import DTYPE, BatchNormState, Tensor


class ParamStore:
    """Dotted-path -> Tensor map with per-parameter trainable flags.

    Batch-norm running statistics are kept in a parallel buffer map: they are
    serialized with checkpoints but never receive gradients.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._trainable: Dict[str, bool] = {}
        self._bn_states: Dict[str, BatchNormState] = {}

    # -- registration ------------------------------------------------------
    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(value, dtype=DTYPE), requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def add_bn_state(self, name: str, channels: int) -> BatchNormState:
        if name in self._bn_states:
            raise ValueError(f"duplicate batch-norm state name {name!r}")
        st = BatchNormState(channels)
        self._bn_states[name] = st
        return st

    # -- access -------------------------------------------------------------
    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def names(self) -> List[str]:
        return list(self._params)

    def bn_state(self, name: str) -> BatchNormState:
        return self._bn_states[name]

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def bn_states(self) -> Iterator[Tuple[str, BatchNormState]]:
        return iter(self._bn_states.items())

    def num_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    # -- trainability ----------------------------------------------------------
    def set_trainable(self, name: str, flag: bool) -> None:
        self._params[name].requires_grad = flag
        self._trainable[name] = flag

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_items(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    # -- serialization ------------------------------------------------------------
    def state_tensors(self) -> Dict[str, np.ndarray]:
        """All parameters plus BN buffers, ready to embed in a checkpoint."""
        out: Dict[str, np.ndarray] = {n: t.data for n, t in self._params.items()}
        for n, st in self._bn_states.items():
            out[f"{n}.running_mean"] = st.mean
            out[f"{n}.running_var"] = st.var
            out[f"{n}.initialized"] = np.array([1.0 if st.initialized else 0.0], dtype=DTYPE)
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], strict: bool = True) -> None:
        for n, t in self._params.items():
            if n not in tensors:
                if strict:
                    raise ValueError(f"checkpoint is missing parameter {n!r}")
                continue
            src = tensors[n]
            if tuple(src.shape) != t.shape:
                raise ValueError(
                    f"checkpoint parameter {n!r} has shape {tuple(src.shape)}, "
                    f"model expects {t.shape}"
                )
            t.data = np.ascontiguousarray(src, dtype=DTYPE)
        for n, st in self._bn_states.items():
            key = f"{n}.running_mean"
            if key not in tensors:
                if strict:
                    raise ValueError(f"checkpoint is missing batch-norm state {n!r}")
                continue
            st.mean = np.ascontiguousarray(tensors[key], dtype=DTYPE)
            st.var = np.ascontiguousarray(tensors[f"{n}.running_var"], dtype=DTYPE)
            st.initialized = bool(tensors[f"{n}.initialized"][0] > 0.5)


def he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    """Fan-in-scaled normal init for conv weights."""
    fan_in = c_in * k * k
    return (rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


def he_linear(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    return (rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)).astype(DTYPE)


def add_conv(store: ParamStore, rng: np.random.Generator, name: str,
             c_in: int, c_out: int, k: int, bias: bool = True) -> None:
    store.add(f"{name}.weight", he_conv(rng, c_out, c_in, k))
    if bias:
        store.add(f"{name}.bias", np.zeros(c_out, dtype=DTYPE))


def add_linear(store: ParamStore, rng: np.random.Generator, name: str,
               n_in: int, n_out: int, bias: bool = True) -> None:
    store.add(f"{name}.weight", he_linear(rng, n_out, n_in))
    if bias:
        store.add(f"{name}.bias", np.zeros(n_out, dtype=DTYPE))


def add_bn(store: ParamStore, name: str, channels: int) -> None:
    store.add(f"{name}.scale", np.ones(channels, dtype=DTYPE))
    store.add(f"{name}.shift", np.zeros(channels, dtype=DTYPE))
    store.add_bn_state(name, channels)
