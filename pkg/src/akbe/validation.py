"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .core import ConfigError, DataError, QuestionSpec


def check_questions(X, max_turns=None, n_features=None) -> list:
    """Validate a question collection and return it as a list.

    Accepts any iterable of :class:`QuestionSpec` or of their dict form.
    """
    if isinstance(X, QuestionSpec):
        raise DataError("expected a collection of questions, got a single QuestionSpec")
    out = []
    for x in X:
        if isinstance(x, dict):
            x = QuestionSpec.from_dict(x)
        elif not isinstance(x, QuestionSpec):
            raise DataError(f"expected QuestionSpec, got {type(x).__name__}")
        out.append(x)
    if not out:
        raise DataError("empty question collection")
    ids = [q.id for q in out]
    if len(set(ids)) != len(ids):
        raise DataError("question ids must be unique")
    dims = {len(q.features) for q in out}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dimensions {sorted(dims)}")
    dim = dims.pop()
    if n_features is not None and dim != n_features:
        raise DataError(f"questions have {dim} features, estimator was fitted with {n_features}")
    for q in out:
        if not np.all(np.isfinite(q.feature_array)):
            raise DataError(f"{q.id}: non-finite features")
        if max_turns is not None and q.hops_required > max_turns:
            raise DataError(f"{q.id}: hops_required {q.hops_required} exceeds max_turns {max_turns}")
    return out


def check_positive(name, value, strict=True):
    ok = value > 0 if strict else value >= 0
    if not ok:
        raise ConfigError(f"{name} must be {'>' if strict else '>='} 0, got {value}")
    return value
