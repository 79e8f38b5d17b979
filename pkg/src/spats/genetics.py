"""Generalized heritability and genotype-effect tables."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .reml import FittedModel

MODES = ("standard", "cullis", "oakey")
# relative threshold on the R diagonal of the rank-revealing QR
RANK_TOL = 1e-8


class HeritabilityError(ValueError):
    pass


@dataclass(frozen=True)
class HeritabilityReport:
    mode: str
    value: float
    ed_genetic: float
    m_g: int
    zero_eigen_count: int
    replicates: Optional[int] = None


def _rank(a: np.ndarray) -> int:
    if a.shape[1] == 0:
        return 0
    _, r, _ = scipy.linalg.qr(a, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    return int(np.count_nonzero(d > RANK_TOL * d[0])) if d.size and d[0] > 0 else 0


def genotype_block_index(model: FittedModel, name: Optional[str] = None) -> int:
    """Index of the random genotype block (by ``name``, else by kind)."""
    blocks = model.design.blocks
    if name is not None:
        try:
            return model.design.block_index(name)
        except KeyError:
            raise HeritabilityError(f"no random block named {name!r}") from None
    for k, b in enumerate(blocks):
        if b.kind == "genotype":
            return k
    raise HeritabilityError("heritability requires the genotype as a random block")


def zero_eigen_count(model: FittedModel, k: int) -> int:
    """Number of genetic directions absorbed by the fixed effects.

    ``m_g - (rank([X, Z_g]) - rank(X))``; the complement bounds ED_g.
    """
    d = model.design
    z = d.blocks[k].z
    return z.shape[1] - (_rank(np.hstack([d.x, z])) - _rank(d.x))


def oakey_ratio(ed_genetic: float, m_g: int, zeta: int = 0) -> float:
    """ED_g / (m_g - zeta_g)."""
    if m_g - zeta <= 0:
        raise HeritabilityError("no genetic directions left after the fixed effects")
    return ed_genetic / (m_g - zeta)


def cullis_ratio(ed_genetic: float, m_g: int) -> float:
    """ED_g / m_g."""
    if m_g <= 0:
        raise HeritabilityError("m_g must be positive")
    return ed_genetic / m_g


def heritability(model: FittedModel, mode: str = "oakey", *, block: Optional[str] = None
                 ) -> HeritabilityReport:
    """Heritability of the genotype block.

    ``oakey``: ED_g / (m_g - zeta_g).  ``cullis``: ED_g / m_g.
    ``standard``: s_g^2 / (s_g^2 + s^2 / r), only for equal replication.
    """
    if mode not in MODES:
        raise HeritabilityError(f"mode must be one of {MODES}, got {mode!r}")
    k = genotype_block_index(model, block)
    b = model.design.blocks[k]
    m_g = b.size
    ed = float(model.effective_dims[k])
    zeta = zero_eigen_count(model, k)
    reps = None
    if mode == "oakey":
        value = oakey_ratio(ed, m_g, zeta)
    elif mode == "cullis":
        value = cullis_ratio(ed, m_g)
    else:
        counts = b.z.sum(axis=0)
        if not np.all(counts == counts[0]) or np.any(b.z.sum(axis=1) > 1):
            raise HeritabilityError("standard heritability needs every genotype replicated equally")
        reps = int(counts[0])
        sg = float(model.variances[k])
        value = sg / (sg + model.sigma2 / reps)
    # ED_g can overshoot its bound by rounding only
    value = min(max(value, 0.0), 1.0)
    return HeritabilityReport(mode, value, ed, m_g, zeta, reps)


@dataclass(frozen=True)
class GenotypeEffect:
    label: str
    value: float
    kind: str  # "BLUP", "BLUE" or "reference"


def genotype_predictions(model: FittedModel) -> list[GenotypeEffect]:
    """Genotype effects with identifiers.

    A random genotype gives one BLUP per line plus a BLUE per check.  A
    fixed genotype gives BLUEs relative to the reference level, which is
    listed first with value 0.
    """
    asm = model.assembled
    if asm is None:
        raise ValueError("genotype labels need a model built by build_system")
    spec = asm.spec
    labels = asm.labels
    out: list[GenotypeEffect] = []
    if spec.genotype_role == "none":
        return out
    if spec.genotype_role == "random":
        k = genotype_block_index(model)
        for lab, v in zip(labels.genotype_levels, model.result.c[k]):
            out.append(GenotypeEffect(lab, float(v), "BLUP"))
        prefix = "check["
    else:
        all_levels = sorted(set(asm.data.genotypes[i] for i in labels.observed))
        out.append(GenotypeEffect(all_levels[0], 0.0, "reference"))
        prefix = f"{spec.genotype_name}["
    names = model.design.x_names
    for lab in labels.genotype_fixed_levels:
        j = names.index(f"{prefix}{lab}]")
        out.append(GenotypeEffect(lab, float(model.result.beta[j]), "BLUE"))
    return out
