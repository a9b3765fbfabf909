"""State-space model families shared by every estimator.

Two families are provided:

* ``NetworkModel``: the canonical network form
  ``x_{t+1} = A x_t + B phi(gain * x_t + offset) + bias``. The Hopfield
  benchmark network ``W tanh(x) + D * x + c`` is the special case
  ``A = diag(D)``, ``B = W``, ``bias = c``.
* ``EiBrainModel``: paired excitatory/inhibitory populations per region,
  expressible as a ``NetworkModel`` on the stacked ``[p; r]`` state.

Both expose the same protocol (``step``, ``jacobian``, ``param_jacobian``,
``jacobian_state_derivative``, ``jacobian_param_derivative``, ``pack``,
``unpack``) so the filters and the general backward pass never need to know
which family they are working with.
"""

from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import Protocol, runtime_checkable

import numpy as np

from estimation.errors import InvalidInputError


class Nonlinearity(str, Enum):
    TANH = "tanh"
    IDENTITY = "identity"

    def apply(self, a: np.ndarray) -> np.ndarray:
        if self is Nonlinearity.TANH:
            return np.tanh(a)
        return np.asarray(a, dtype=float).copy()

    def derivative(self, a: np.ndarray) -> np.ndarray:
        if self is Nonlinearity.TANH:
            return 1.0 - np.tanh(a) ** 2
        return np.ones_like(a, dtype=float)

    def second_derivative(self, a: np.ndarray) -> np.ndarray:
        if self is Nonlinearity.TANH:
            t = np.tanh(a)
            return -2.0 * t * (1.0 - t**2)
        return np.zeros_like(a, dtype=float)


@dataclass(frozen=True)
class ParameterLayout:
    """Named blocks of a flat parameter vector, in storage order."""

    blocks: tuple[tuple[str, int], ...]

    @cached_property
    def slices(self) -> dict[str, slice]:
        out = {}
        start = 0
        for name, size in self.blocks:
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def size(self) -> int:
        return sum(size for _, size in self.blocks)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.blocks)

    def split(self, values: np.ndarray) -> dict[str, np.ndarray]:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.size,):
            raise InvalidInputError(
                f"Parameter vector has shape {values.shape}, layout expects ({self.size},)"
            )
        return {name: values[sl] for name, sl in self.slices.items()}


@dataclass(frozen=True, eq=False)
class ParameterVector:
    values: np.ndarray
    layout: ParameterLayout

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.layout.size,):
            raise InvalidInputError(
                f"Parameter vector length {values.size} does not match layout size {self.layout.size}"
            )
        object.__setattr__(self, "values", values)

    def block(self, name: str) -> np.ndarray:
        return self.values[self.layout.slices[name]]

    def __len__(self) -> int:
        return self.layout.size


@runtime_checkable
class StateSpaceModel(Protocol):
    """What the filters and the general backward pass need from a model family."""

    @property
    def n_states(self) -> int: ...

    @property
    def layout(self) -> ParameterLayout: ...

    def step(self, x: np.ndarray) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray) -> np.ndarray: ...

    def param_jacobian(self, x: np.ndarray) -> np.ndarray: ...

    def jacobian_state_derivative(self, x: np.ndarray, i: int) -> np.ndarray: ...

    def jacobian_param_derivative(self, x: np.ndarray, j: int) -> np.ndarray: ...

    def pack(self) -> ParameterVector: ...

    def unpack(self, values: np.ndarray) -> "StateSpaceModel": ...


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def _check_state(x: np.ndarray, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise InvalidInputError(f"State has shape {x.shape}, expected ({n},)")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("State contains non-finite entries")
    return x


NETWORK_BLOCKS = ("A", "B.free", "c", "bias")


@dataclass(frozen=True, eq=False)
class NetworkModel:
    a_matrix: np.ndarray
    b_matrix: np.ndarray
    offset: np.ndarray
    gain: np.ndarray | None = None
    nonlinearity: Nonlinearity = Nonlinearity.TANH
    free_mask: np.ndarray | None = None
    bias: np.ndarray | None = None
    trainable: tuple[str, ...] = ("B.free",)

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidInputError(f"a_matrix must be square, got shape {a.shape}")
        n = a.shape[0]
        if n == 0:
            raise InvalidInputError("Network models need at least one state")
        b = np.asarray(self.b_matrix, dtype=float)
        if b.shape != (n, n):
            raise InvalidInputError(f"b_matrix has shape {b.shape}, expected ({n}, {n})")
        offset = np.asarray(self.offset, dtype=float)
        gain = np.ones(n) if self.gain is None else np.asarray(self.gain, dtype=float)
        bias = np.zeros(n) if self.bias is None else np.asarray(self.bias, dtype=float)
        for name, vector in (("offset", offset), ("gain", gain), ("bias", bias)):
            if vector.shape != (n,):
                raise InvalidInputError(f"{name} has shape {vector.shape}, expected ({n},)")
        mask = b != 0 if self.free_mask is None else np.asarray(self.free_mask, dtype=bool)
        if mask.shape != (n, n):
            raise InvalidInputError(f"free_mask has shape {mask.shape}, expected ({n}, {n})")
        if np.any(b[~mask] != 0):
            raise InvalidInputError("b_matrix has nonzero entries outside free_mask")
        unknown = set(self.trainable) - set(NETWORK_BLOCKS)
        if unknown:
            raise InvalidInputError(f"Unknown trainable blocks: {sorted(unknown)}")

        object.__setattr__(self, "a_matrix", _frozen(a))
        object.__setattr__(self, "b_matrix", _frozen(b))
        object.__setattr__(self, "offset", _frozen(offset))
        object.__setattr__(self, "gain", _frozen(gain))
        object.__setattr__(self, "bias", _frozen(bias))
        mask = np.array(mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "free_mask", mask)
        object.__setattr__(self, "nonlinearity", Nonlinearity(self.nonlinearity))
        # canonical block order regardless of how the caller listed them
        object.__setattr__(
            self, "trainable", tuple(b for b in NETWORK_BLOCKS if b in self.trainable)
        )

    @classmethod
    def hopfield(cls, w, d, c, free_mask=None, trainable=("B.free",)) -> "NetworkModel":
        """``x_{t+1} = W tanh(x_t) + D * x_t + c``."""
        d = np.asarray(d, dtype=float)
        return cls(
            a_matrix=np.diag(d),
            b_matrix=w,
            offset=np.zeros(d.size),
            nonlinearity=Nonlinearity.TANH,
            free_mask=free_mask,
            bias=c,
            trainable=trainable,
        )

    @property
    def n_states(self) -> int:
        return self.a_matrix.shape[0]

    @cached_property
    def free_indices(self) -> np.ndarray:
        """Row-major flat indices of the trainable entries of ``b_matrix``."""
        return np.flatnonzero(self.free_mask.ravel())

    def _activation(self, x: np.ndarray) -> np.ndarray:
        return self.gain * x + self.offset

    def step(self, x: np.ndarray) -> np.ndarray:
        x = _check_state(x, self.n_states)
        return (
            self.a_matrix @ x
            + self.b_matrix @ self.nonlinearity.apply(self._activation(x))
            + self.bias
        )

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        x = _check_state(x, self.n_states)
        slope = self.nonlinearity.derivative(self._activation(x)) * self.gain
        return self.a_matrix + self.b_matrix * slope[None, :]

    def activation_second_derivative(self, x: np.ndarray) -> np.ndarray:
        x = _check_state(x, self.n_states)
        return self.nonlinearity.second_derivative(self._activation(x)) * self.gain**2

    @cached_property
    def layout(self) -> ParameterLayout:
        n = self.n_states
        sizes = {"A": n * n, "B.free": self.free_indices.size, "c": n, "bias": n}
        return ParameterLayout(tuple((name, sizes[name]) for name in self.trainable))

    def pack(self) -> ParameterVector:
        pieces = {
            "A": lambda: self.a_matrix.ravel(),
            "B.free": lambda: self.b_matrix.ravel()[self.free_indices],
            "c": lambda: self.offset,
            "bias": lambda: self.bias,
        }
        values = [pieces[name]() for name in self.trainable]
        return ParameterVector(
            np.concatenate(values) if values else np.zeros(0), self.layout
        )

    def unpack(self, values: np.ndarray) -> "NetworkModel":
        blocks = self.layout.split(values)
        n = self.n_states
        changes = {}
        if "A" in blocks:
            changes["a_matrix"] = blocks["A"].reshape(n, n)
        if "B.free" in blocks:
            b = np.zeros(n * n)
            b[self.free_indices] = blocks["B.free"]
            changes["b_matrix"] = b.reshape(n, n)
        if "c" in blocks:
            changes["offset"] = blocks["c"]
        if "bias" in blocks:
            changes["bias"] = blocks["bias"]
        return replace(self, **changes)

    def param_jacobian(self, x: np.ndarray) -> np.ndarray:
        """``df/dtheta`` as an ``n x q`` matrix in layout order."""
        x = _check_state(x, self.n_states)
        n = self.n_states
        a = self._activation(x)
        columns = []
        for name in self.trainable:
            if name == "A":
                # column (i, k) holds x_k in row i
                columns.append(np.kron(np.eye(n), x[None, :]))
            elif name == "B.free":
                full = np.kron(np.eye(n), self.nonlinearity.apply(a)[None, :])
                columns.append(full[:, self.free_indices])
            elif name == "c":
                columns.append(self.b_matrix * self.nonlinearity.derivative(a)[None, :])
            elif name == "bias":
                columns.append(np.eye(n))
        if not columns:
            return np.zeros((n, 0))
        return np.hstack(columns)

    def jacobian_state_derivative(self, x: np.ndarray, i: int) -> np.ndarray:
        """``dF'/dx^i``: only column ``i`` of the Jacobian depends on ``x^i``."""
        curvature = self.activation_second_derivative(x)
        out = np.zeros((self.n_states, self.n_states))
        out[:, i] = self.b_matrix[:, i] * curvature[i]
        return out

    def jacobian_param_derivative(self, x: np.ndarray, j: int) -> np.ndarray:
        """``dF'/dtheta^j`` for parameter ``j`` of the layout."""
        x = _check_state(x, self.n_states)
        n = self.n_states
        a = self._activation(x)
        out = np.zeros((n, n))
        for name, sl in self.layout.slices.items():
            if not sl.start <= j < sl.stop:
                continue
            local = j - sl.start
            if name == "A":
                out[divmod(local, n)] = 1.0
            elif name == "B.free":
                row, col = divmod(int(self.free_indices[local]), n)
                out[row, col] = self.nonlinearity.derivative(a[col]) * self.gain[col]
            elif name == "c":
                out[:, local] = (
                    self.b_matrix[:, local]
                    * self.nonlinearity.second_derivative(a[local])
                    * self.gain[local]
                )
            return out
        raise InvalidInputError(f"Parameter index {j} outside layout of size {self.layout.size}")


EI_BLOCKS = ("Wp", "Wr", "Jp", "Jr", "c")


@dataclass(frozen=True, eq=False)
class EiBrainModel:
    """Excitatory (p) and inhibitory (r) populations per region.

    ``p' = p / tau_p + W_p psi_p - J_p * psi_r`` and
    ``r' = r / tau_r + W_r psi_p - J_r * psi_r`` with
    ``psi = tanh(gain * [p; r] + offset)``.
    """

    w_p: np.ndarray
    w_r: np.ndarray
    j_p: np.ndarray
    j_r: np.ndarray
    tau_p: np.ndarray
    tau_r: np.ndarray
    gain: np.ndarray | None = None
    offset: np.ndarray | None = None
    trainable: tuple[str, ...] = ("Wp", "Wr")

    def __post_init__(self):
        w_p = np.asarray(self.w_p, dtype=float)
        if w_p.ndim != 2 or w_p.shape[0] != w_p.shape[1] or w_p.shape[0] == 0:
            raise InvalidInputError(f"w_p must be a non-empty square matrix, got {w_p.shape}")
        n = w_p.shape[0]
        w_r = np.asarray(self.w_r, dtype=float)
        if w_r.shape != (n, n):
            raise InvalidInputError(f"w_r has shape {w_r.shape}, expected ({n}, {n})")
        vectors = {}
        for name in ("j_p", "j_r", "tau_p", "tau_r"):
            vectors[name] = np.asarray(getattr(self, name), dtype=float)
            if vectors[name].shape != (n,):
                raise InvalidInputError(f"{name} has shape {vectors[name].shape}, expected ({n},)")
        if np.any(vectors["tau_p"] <= 0) or np.any(vectors["tau_r"] <= 0):
            raise InvalidInputError("Decay constants must be strictly positive")
        gain = np.ones(2 * n) if self.gain is None else np.asarray(self.gain, dtype=float)
        offset = np.zeros(2 * n) if self.offset is None else np.asarray(self.offset, dtype=float)
        if gain.shape != (2 * n,) or offset.shape != (2 * n,):
            raise InvalidInputError(f"gain and offset must have length {2 * n}")
        unknown = set(self.trainable) - set(EI_BLOCKS)
        if unknown:
            raise InvalidInputError(f"Unknown trainable blocks: {sorted(unknown)}")

        object.__setattr__(self, "w_p", _frozen(w_p))
        object.__setattr__(self, "w_r", _frozen(w_r))
        for name, vector in vectors.items():
            object.__setattr__(self, name, _frozen(vector))
        object.__setattr__(self, "gain", _frozen(gain))
        object.__setattr__(self, "offset", _frozen(offset))
        object.__setattr__(
            self, "trainable", tuple(b for b in EI_BLOCKS if b in self.trainable)
        )

    @property
    def n_regions(self) -> int:
        return self.w_p.shape[0]

    @property
    def n_states(self) -> int:
        return 2 * self.n_regions

    def step(self, x: np.ndarray) -> np.ndarray:
        x = _check_state(x, self.n_states)
        n = self.n_regions
        psi = np.tanh(self.gain * x + self.offset)
        psi_p, psi_r = psi[:n], psi[n:]
        p_next = x[:n] / self.tau_p + self.w_p @ psi_p - self.j_p * psi_r
        r_next = x[n:] / self.tau_r + self.w_r @ psi_p - self.j_r * psi_r
        return np.concatenate([p_next, r_next])

    def to_network(self) -> NetworkModel:
        n = self.n_regions
        b = np.block([[self.w_p, -np.diag(self.j_p)], [self.w_r, -np.diag(self.j_r)]])
        diagonal = np.eye(n, dtype=bool)
        mask = np.block([[np.ones((n, n), dtype=bool), diagonal], [np.ones((n, n), dtype=bool), diagonal]])
        return NetworkModel(
            a_matrix=np.diag(np.concatenate([1.0 / self.tau_p, 1.0 / self.tau_r])),
            b_matrix=b,
            offset=self.offset,
            gain=self.gain,
            nonlinearity=Nonlinearity.TANH,
            free_mask=mask,
            trainable=("B.free", "c") if "c" in self.trainable else ("B.free",),
        )

    @cached_property
    def network(self) -> NetworkModel:
        return self.to_network()

    @cached_property
    def network_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Position and sign of every E/I parameter inside the network layout."""
        n = self.n_regions
        net = self.network
        position = {int(flat): k for k, flat in enumerate(net.free_indices)}
        index, sign = [], []
        for name in self.trainable:
            if name == "Wp":
                flats = [i * 2 * n + j for i in range(n) for j in range(n)]
                signs = [1.0] * len(flats)
            elif name == "Wr":
                flats = [(n + i) * 2 * n + j for i in range(n) for j in range(n)]
                signs = [1.0] * len(flats)
            elif name == "Jp":
                flats = [i * 2 * n + n + i for i in range(n)]
                signs = [-1.0] * n
            elif name == "Jr":
                flats = [(n + i) * 2 * n + n + i for i in range(n)]
                signs = [-1.0] * n
            else:
                c_start = net.layout.slices["c"].start
                index.extend(range(c_start, c_start + 2 * n))
                sign.extend([1.0] * (2 * n))
                continue
            index.extend(position[f] for f in flats)
            sign.extend(signs)
        return np.array(index, dtype=int), np.array(sign)

    def pull_back(self, network_gradient: np.ndarray) -> np.ndarray:
        """Map a gradient over the network layout onto this model's layout."""
        index, sign = self.network_index
        return sign * np.asarray(network_gradient)[index]

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.network.jacobian(x)

    def activation_second_derivative(self, x: np.ndarray) -> np.ndarray:
        return self.network.activation_second_derivative(x)

    @cached_property
    def layout(self) -> ParameterLayout:
        n = self.n_regions
        sizes = {"Wp": n * n, "Wr": n * n, "Jp": n, "Jr": n, "c": 2 * n}
        return ParameterLayout(tuple((name, sizes[name]) for name in self.trainable))

    def pack(self) -> ParameterVector:
        pieces = {
            "Wp": self.w_p.ravel(),
            "Wr": self.w_r.ravel(),
            "Jp": self.j_p,
            "Jr": self.j_r,
            "c": self.offset,
        }
        values = [pieces[name] for name in self.trainable]
        return ParameterVector(
            np.concatenate(values) if values else np.zeros(0), self.layout
        )

    def unpack(self, values: np.ndarray) -> "EiBrainModel":
        blocks = self.layout.split(values)
        n = self.n_regions
        fields = {"Wp": "w_p", "Wr": "w_r", "Jp": "j_p", "Jr": "j_r", "c": "offset"}
        changes = {}
        for name, value in blocks.items():
            changes[fields[name]] = value.reshape(n, n) if name in ("Wp", "Wr") else value
        return replace(self, **changes)

    def param_jacobian(self, x: np.ndarray) -> np.ndarray:
        index, sign = self.network_index
        return self.network.param_jacobian(x)[:, index] * sign[None, :]

    def jacobian_state_derivative(self, x: np.ndarray, i: int) -> np.ndarray:
        return self.network.jacobian_state_derivative(x, i)

    def jacobian_param_derivative(self, x: np.ndarray, j: int) -> np.ndarray:
        index, sign = self.network_index
        return sign[j] * self.network.jacobian_param_derivative(x, int(index[j]))


def step(model: StateSpaceModel, x: np.ndarray) -> np.ndarray:
    return model.step(x)


def jacobian(model: StateSpaceModel, x: np.ndarray) -> np.ndarray:
    return model.jacobian(x)


def activation_second_derivative(model: NetworkModel | EiBrainModel, x: np.ndarray) -> np.ndarray:
    return model.activation_second_derivative(x)


def pack_parameters(model: StateSpaceModel) -> ParameterVector:
    return model.pack()


def unpack_parameters(model: StateSpaceModel, vector) -> StateSpaceModel:
    values = vector.values if isinstance(vector, ParameterVector) else vector
    return model.unpack(values)
