"""Per-task accuracy matrix and the final accuracy / forgetting measures."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError, UsageError


class MetricsMatrix:
    """Lower-triangular T x T table: entry [k][i] is the accuracy on task i's
    test classes after finishing training on task k."""

    def __init__(self, num_tasks):
        if num_tasks < 1:
            raise ConfigurationError("need at least one task")
        self.num_tasks = num_tasks
        self._rows = {}

    def record_eval(self, k, per_task_accuracies):
        accs = [float(a) for a in per_task_accuracies]
        if k in self._rows:
            raise UsageError(f"row {k} already recorded")
        if not 0 <= k < self.num_tasks or len(accs) != k + 1:
            raise ConfigurationError(
                f"row {k} needs {k + 1} accuracies, got {len(accs)}"
            )
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ConfigurationError("accuracies must lie in [0, 1]")
        self._rows[k] = accs

    def row(self, k):
        return list(self._rows[k])

    @property
    def complete(self):
        return len(self._rows) == self.num_tasks

    def _require_complete(self):
        if not self.complete:
            raise UsageError("matrix incomplete; missing evaluation rows")

    def final_accuracy(self):
        """Mean over tasks of the last row's accuracies."""
        self._require_complete()
        return float(np.mean(self._rows[self.num_tasks - 1]))

    def forgetting(self):
        """Mean peak-minus-final accuracy over all tasks but the last."""
        self._require_complete()
        T = self.num_tasks
        if T < 2:
            raise ConfigurationError("forgetting needs at least two tasks")
        final = self._rows[T - 1]
        gaps = []
        for t in range(T - 1):
            peak = max(self._rows[k][t] for k in range(t, T))
            gaps.append(peak - final[t])
        return float(np.mean(gaps))

    # -- serialization ------------------------------------------------------

    def to_csv(self, path):
        """One row per evaluation point plus a summary row with A_f and F."""
        lines = ["after_task," + ",".join(f"task_{t}" for t in range(self.num_tasks))]
        for k in range(self.num_tasks):
            cells = [f"{a:.12f}" for a in self._rows.get(k, [])]
            cells += [""] * (self.num_tasks - len(cells))
            lines.append(f"{k}," + ",".join(cells))
        if self.complete:
            f_value = f"{self.forgetting():.12f}" if self.num_tasks >= 2 else ""
            lines.append(f"summary_A_f,{self.final_accuracy():.12f}")
            lines.append(f"summary_F,{f_value}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_accuracies(cls, rows):
        m = cls(len(rows))
        for k, row in enumerate(rows):
            m.record_eval(k, row)
        return m


def accuracy(predictions, truth):
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if len(truth) == 0:
        raise ConfigurationError("accuracy over an empty test set")
    return float(np.mean(predictions == truth))
