"""Multi-condition classifier-free guidance with separated scales.

The model is evaluated on a nested chain of condition sets (unconditional,
+text, +attributes, +audio, in that fixed order) and the guided prediction is

    u + sum_i lambda_i * (s_i - s_{i-1})

over the conditions actually present. The model outputs are v-predictions;
v is affine in the score at fixed (x_t, t), so composing in v-space is
equivalent to composing scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import DimensionError, InvalidInputError

CONDITION_ORDER = ("text", "attr", "audio")


@dataclass
class GuidanceScales:
    lambda_text: float = 7.0
    lambda_attr: float = 2.0
    lambda_audio: float = 1.0

    def lambdas_for(self, present: Sequence[str]) -> list[float]:
        """Scales for the present conditions, in chain order."""
        present = set(present)
        unknown = present - set(CONDITION_ORDER)
        if unknown:
            raise InvalidInputError(f"unknown conditions {sorted(unknown)}")
        named = {"text": self.lambda_text, "attr": self.lambda_attr, "audio": self.lambda_audio}
        return [named[c] for c in CONDITION_ORDER if c in present]


def required_passes(present: Sequence[str]) -> list[frozenset]:
    """The nested chain of condition sets the sampler must evaluate.

    k present conditions need k+1 forward passes, each adding one condition
    in the fixed text -> attr -> audio order.
    """
    present = set(present)
    unknown = present - set(CONDITION_ORDER)
    if unknown:
        raise InvalidInputError(f"unknown conditions {sorted(unknown)}")
    chain = [frozenset()]
    for c in CONDITION_ORDER:
        if c in present:
            chain.append(chain[-1] | {c})
    return chain


def compose(estimates: Sequence, lambdas: Sequence[float]):
    """Combine the chain of model outputs into the guided prediction."""
    if len(estimates) == 0:
        raise InvalidInputError("need at least the unconditional estimate")
    if len(lambdas) != len(estimates) - 1:
        raise InvalidInputError(
            f"{len(estimates)} estimates need {len(estimates) - 1} scales, got {len(lambdas)}"
        )
    shapes = [getattr(e, "shape", ()) for e in estimates]
    if any(s != shapes[0] for s in shapes):
        raise DimensionError(f"estimate shapes differ: {shapes}")
    # regrouped per estimate: u + sum_i lam_i (s_i - s_{i-1})
    #   == (1 - lam_1) u + sum_{i<k} (lam_i - lam_{i+1}) s_i + lam_k s_k,
    # which telescopes exactly (all-ones scales leave only the last term)
    coeffs = [1.0]
    for lam in lambdas:
        coeffs[-1] -= lam
        coeffs.append(lam)
    out = coeffs[-1] * estimates[-1]
    for c, e in zip(coeffs[:-1], estimates[:-1]):
        if c != 0.0:
            out = out + c * e
    return out
