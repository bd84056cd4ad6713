from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from app.core.errors import ConfigError
from app.models.scheme import ClosedLoopLog
import logging

logger = logging.getLogger(__name__)


class PlotService:

    @staticmethod
    def plot_states(log: ClosedLoopLog, nodes: Sequence[int], path: Union[str, Path]) -> Path:
        """
        Line chart of the true states of `nodes` over time, one line per state component

        Args:
            log: Completed closed-loop log
            nodes: Subsystems to draw (must appear in the log)
            path: Output file; the format follows the suffix (svg by default)

        Returns:
            Path: the written file
        """
        missing = sorted(set(nodes) - set(log.nodes))
        if missing:
            raise ConfigError("Plot nodes are not part of the run", {"missing": missing})

        path = Path(path)
        fig, ax = plt.subplots(figsize=(7, 4))
        try:
            for node in nodes:
                history = log.state_history(node)
                steps = [record.t for record in log.for_node(node)]
                for component in range(history.shape[1]):
                    ax.plot(steps, history[:, component], marker=".", linewidth=0.8, label=f"x{component + 1} of node {node}")
            ax.set_xlabel("time step t")
            ax.set_ylabel("state")
            ax.grid(True)
            ax.legend(fontsize="small", ncol=2)
            fig.tight_layout()
            fig.savefig(path, format=path.suffix.lstrip(".") or "svg")
        finally:
            plt.close(fig)
        logger.info(f"Wrote state plot for nodes {list(nodes)} to {path}")
        return path
