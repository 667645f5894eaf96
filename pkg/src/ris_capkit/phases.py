"""RIS phase configurations and phase quantization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = ["PhaseConfig", "quantize_phases"]

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True, eq=False)
class PhaseConfig:
    """Reflection phases ``phases[k, n]`` (radians) of every RIS element.

    Reflection coefficients ``exp(1j * phases)`` have unit modulus by
    construction.  When ``quantization_bits`` is set every phase lies on the
    lattice ``2*pi*j / 2**bits``.
    """

    phases: np.ndarray
    quantization_bits: int | None = None

    def __post_init__(self):
        phases = np.array(self.phases, dtype=float)
        if phases.ndim == 1:
            phases = phases[None, :]
        if phases.ndim != 2:
            raise ConfigError("phases must have shape (K, ns)", "phases")
        if not np.all(np.isfinite(phases)):
            raise ConfigError("phases must be finite", "phases")
        phases.setflags(write=False)
        object.__setattr__(self, "phases", phases)
        bits = self.quantization_bits
        if bits is not None:
            if bits < 1:
                raise ConfigError("must be >= 1", "quantization_bits")
            x = np.mod(phases, TWO_PI) / (TWO_PI / 2**bits)
            if np.max(np.abs(x - np.round(x)), initial=0.0) > 1e-9:
                raise ConfigError("phases are not on the quantization lattice", "quantization_bits")

    @classmethod
    def identity(cls, num_riss, ns):
        return cls(np.zeros((num_riss, ns)))

    @property
    def num_riss(self):
        return self.phases.shape[0]

    @property
    def ns(self):
        return self.phases.shape[1]

    @property
    def reflection(self):
        return np.exp(1j * self.phases)

    def __eq__(self, other):
        if not isinstance(other, PhaseConfig):
            return NotImplemented
        return self.quantization_bits == other.quantization_bits and np.array_equal(self.phases, other.phases)

    __hash__ = None


def as_phase_array(phases):
    """Accept a ``PhaseConfig`` or a raw ``(K, ns)`` array."""
    if isinstance(phases, PhaseConfig):
        return phases.phases
    arr = np.asarray(phases, dtype=float)
    return arr[None, :] if arr.ndim == 1 else arr


def quantize_phases(phases, bits):
    """Project every phase onto the nearest point of ``{2*pi*j / 2**bits}``.

    Ties go to the smaller angle.  The projection is idempotent.
    """
    if bits is None or int(bits) != bits or bits < 1:
        raise ConfigError("quantization needs bits >= 1", "bits")
    bits = int(bits)
    levels = 2**bits
    step = TWO_PI / levels
    x = np.mod(as_phase_array(phases), TWO_PI) / step
    j = np.mod(np.ceil(x - 0.5), levels)
    return PhaseConfig(j * step, quantization_bits=bits)
