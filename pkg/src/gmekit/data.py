"""Labeled collections of recording vectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Recording vectors (rows of ``vectors``) with utterance and speaker ids."""

    vectors: np.ndarray
    utt_ids: tuple
    speaker_ids: tuple

    def __post_init__(self):
        X = np.asarray(self.vectors, dtype=float)
        if X.ndim != 2:
            raise ValueError("vectors must be a 2-D array")
        utt_ids = tuple(str(u) for u in self.utt_ids)
        speaker_ids = tuple(str(s) for s in self.speaker_ids)
        if not (len(utt_ids) == len(speaker_ids) == X.shape[0]):
            raise ValueError(
                f"{X.shape[0]} vectors but {len(utt_ids)} utt ids and "
                f"{len(speaker_ids)} speaker ids"
            )
        if len(set(utt_ids)) != len(utt_ids):
            raise ValueError("utterance ids must be unique")
        object.__setattr__(self, "vectors", X)
        object.__setattr__(self, "utt_ids", utt_ids)
        object.__setattr__(self, "speaker_ids", speaker_ids)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def speakers(self) -> list:
        """Speaker ids in order of first appearance."""
        return list(dict.fromkeys(self.speaker_ids))

    def speaker_labels(self):
        """Integer speaker labels (first-appearance order) and the speaker list."""
        speakers = self.speakers
        index = {s: i for i, s in enumerate(speakers)}
        return np.array([index[s] for s in self.speaker_ids], dtype=int), speakers

    def index_of(self) -> dict:
        return {u: i for i, u in enumerate(self.utt_ids)}

    def subset(self, rows: Sequence[int]) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=int)
        return LabeledDataset(
            self.vectors[rows],
            tuple(self.utt_ids[i] for i in rows),
            tuple(self.speaker_ids[i] for i in rows),
        )

    def select_speakers(self, speakers) -> "LabeledDataset":
        keep = set(speakers)
        return self.subset([i for i, s in enumerate(self.speaker_ids) if s in keep])
