"""Linear-chain CRF head: forward-algorithm NLL and Viterbi decoding.

The transition matrix is (n_tags + 2) x (n_tags + 2): index ``n_tags`` is the
start state (BOS), ``n_tags + 1`` the end state (EOS).  Transitions into BOS
and out of EOS are never read by any scoring path, so they act as -inf without
storing non-finite values.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nm
from .errors import ContractViolationError

__all__ = ["crf_log_likelihood", "crf_viterbi_decode", "bos_index", "eos_index"]


def bos_index(n_tags: int) -> int:
    return n_tags


def eos_index(n_tags: int) -> int:
    return n_tags + 1


def _check_inputs(emissions: nm.Tensor, transitions: nm.Tensor, n_tags: int) -> int:
    if emissions.ndim != 2 or emissions.shape[1] != n_tags:
        raise ContractViolationError(
            f"emissions must be (L, {n_tags}), got {emissions.shape}"
        )
    length = emissions.shape[0]
    if length < 1:
        raise ContractViolationError("emissions must cover at least one position")
    if transitions.shape != (n_tags + 2, n_tags + 2):
        raise ContractViolationError(
            f"transitions must be ({n_tags + 2}, {n_tags + 2}), got {transitions.shape}"
        )
    return length


def crf_log_likelihood(
    emissions: nm.Tensor,
    tags: Sequence[int],
    transitions: nm.Tensor,
    n_tags: int,
) -> nm.Tensor:
    """Negative log-likelihood of the gold tag path.

    NLL = logZ - score(gold), with logZ from the forward algorithm in log
    space and score summing emissions plus BOS->t1, t_i->t_{i+1}, t_L->EOS
    transitions.  Differentiable w.r.t. emissions and transitions.
    """
    emissions = nm.tensor(emissions)
    transitions = nm.tensor(transitions)
    length = _check_inputs(emissions, transitions, n_tags)
    tags = [int(t) for t in tags]
    if len(tags) != length:
        raise ContractViolationError(
            f"tag sequence length {len(tags)} != emissions length {length}"
        )

    alpha = nm.chain_start(transitions, emissions, n_tags)
    for i in range(1, length):
        alpha = nm.chain_step(alpha, transitions, emissions, i, n_tags)
    log_z = nm.chain_final(alpha, transitions, n_tags)
    gold = nm.chain_gold_score(emissions, transitions, tags, n_tags)
    return nm.sub(log_z, gold)


def crf_viterbi_decode(
    emissions,
    transitions,
    n_tags: int,
) -> tuple[list[int], float]:
    """Highest-scoring tag path and its score.

    Ties break toward the lowest tag index at every backtracking step
    (np.argmax picks the first maximum).  Pure numpy; not differentiable.
    """
    emissions = nm.tensor(emissions)
    transitions = nm.tensor(transitions)
    length = _check_inputs(emissions, transitions, n_tags)
    em = emissions.data
    tr = transitions.data
    bos, eos = bos_index(n_tags), eos_index(n_tags)

    delta = tr[bos, :n_tags] + em[0]
    backptr = np.empty((length, n_tags), dtype=np.intp)
    for i in range(1, length):
        scores = delta[:, None] + tr[:n_tags, :n_tags]
        backptr[i] = scores.argmax(axis=0)
        delta = scores[backptr[i], np.arange(n_tags)] + em[i]
    final = delta + tr[:n_tags, eos]
    last = int(final.argmax())
    best_score = float(final[last])

    path = [last]
    for i in range(length - 1, 0, -1):
        path.append(int(backptr[i, path[-1]]))
    path.reverse()
    return path, best_score
