"""Greedy CTC decoding and word error rate scoring."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import no_grad
from .data import Batch, Corpus, make_batches


def greedy_decode(log_probs: np.ndarray, blank: int = 0) -> list[int]:
    """Frame-wise argmax (ties go to the lowest index), collapse repeats, drop blanks."""
    path = np.argmax(np.asarray(log_probs), axis=-1)
    out = []
    prev = None
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return out


@dataclass
class WERRow:
    id: str
    reference: list
    hypothesis: list
    substitutions: int
    deletions: int
    insertions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / len(self.reference) if self.reference else float("nan")


def align(reference: Sequence, hypothesis: Sequence) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of one minimum-edit alignment.

    Among minimum-edit alignments the one with most substitutions is taken, so
    the counts are symmetric under swapping the arguments (D <-> I). Remaining
    ties in the backtrace prefer substitution, then insertion, then deletion.
    """
    n, m = len(reference), len(hypothesis)
    # cost[i, j] = (edits, -substitutions) packed as edits * BIG - subs
    big = n + m + 1
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1) * big
    cost[0, :] = np.arange(m + 1) * big
    for i in range(1, n + 1):
        ri = reference[i - 1]
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (0 if ri == hypothesis[j - 1] else big - 1)
            cost[i, j] = min(diag, cost[i, j - 1] + big, cost[i - 1, j] + big)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = reference[i - 1] == hypothesis[j - 1]
            if cost[i, j] == cost[i - 1, j - 1] + (0 if same else big - 1):
                s += 0 if same else 1
                i, j = i - 1, j - 1
                continue
        if j > 0 and cost[i, j] == cost[i, j - 1] + big:
            ins += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return s, d, ins


def wer(reference: Sequence, hypothesis: Sequence, utt_id: str = "") -> WERRow:
    s, d, i = align(reference, hypothesis)
    return WERRow(utt_id, list(reference), list(hypothesis), s, d, i)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    excluded_empty_reference: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def substitutions(self) -> int:
        return sum(r.substitutions for r in self.rows)

    @property
    def deletions(self) -> int:
        return sum(r.deletions for r in self.rows)

    @property
    def insertions(self) -> int:
        return sum(r.insertions for r in self.rows)

    @property
    def reference_tokens(self) -> int:
        return sum(len(r.reference) for r in self.rows)

    @property
    def wer(self) -> float:
        """Corpus WER: total edits over total reference words."""
        n = self.reference_tokens
        return (self.substitutions + self.deletions + self.insertions) / n if n else float("nan")

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "wer": self.wer,
            "substitutions": self.substitutions,
            "deletions": self.deletions,
            "insertions": self.insertions,
            "reference_tokens": self.reference_tokens,
            "excluded_empty_reference": self.excluded_empty_reference,
            "utterances": [
                {
                    "id": r.id,
                    "reference": " ".join(r.reference),
                    "hypothesis": " ".join(r.hypothesis),
                    "substitutions": r.substitutions,
                    "deletions": r.deletions,
                    "insertions": r.insertions,
                }
                for r in self.rows
            ],
        }

    def write(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def score(references: Sequence, hypotheses: Sequence, ids: Optional[Sequence[str]] = None) -> EvalReport:
    report = EvalReport()
    ids = ids if ids is not None else [str(i) for i in range(len(references))]
    for utt_id, ref, hyp in zip(ids, references, hypotheses):
        if ref is None or len(ref) == 0:
            report.excluded_empty_reference += 1
            continue
        report.rows.append(wer(ref, hyp, utt_id))
    return report


def decode_corpus(params, utterances: Sequence, batch_size: int = 32) -> list[list[int]]:
    """Greedy token-id hypotheses on clean (unaugmented, unmasked) inputs."""
    from .model import forward

    hyps = []
    with no_grad():
        for batch in make_batches(list(utterances), batch_size):
            out = forward(params, batch, mode="ctc_only")
            hyps.extend(greedy_decode(out.utterance_log_probs(i)) for i in range(len(batch)))
    return hyps


def evaluate(params, corpus: Corpus, batch_size: int = 32) -> EvalReport:
    hyps = decode_corpus(params, corpus.utterances, batch_size)
    refs = [u.transcript for u in corpus.utterances]
    hyp_words = [corpus.vocab.decode(h) for h in hyps]
    return score(refs, hyp_words, corpus.ids())
