"""
Line charts of lambdappo's tabular artifacts as standalone SVG files.

The chart layout is chosen from the table's columns: episode logs show the
requested action against the demand and the secondary temperatures against
their bounds, epoch statistics show the multipliers and discounted costs,
plant trajectories show power and the secondary temperatures.
"""

import logging
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ContractError  # noqa: E402
from .records import RecordTable  # noqa: E402

__all__ = ('chart_kind', 'plot_table', 'CHART_KINDS')

logger = logging.getLogger(__name__)

# Fixed salt and no date so identical inputs give byte-identical files
_SVG_SETTINGS = {'svg.hashsalt': 'lambdappo', 'svg.fonttype': 'none'}

# (x column, [(panel title, [(column, label), ...]), ...])
CHART_KINDS: Dict[str, Tuple[str, List[Tuple[str, List[Tuple[str, str]]]]]] \
    = {
        'episode': ('t', [
            ('Load following', [('demand', 'demand'),
                                ('action', 'action')]),
            ('Secondary temperatures', [('t_hx_s_in', 'inlet'),
                                        ('c_in_min', 'inlet minimum'),
                                        ('t_hx_s_out', 'outlet'),
                                        ('c_out_max', 'outlet maximum')]),
        ]),
        'epochs': ('epoch', [
            ('Lagrange multipliers', [('lambda1', 'lambda 1'),
                                      ('lambda2', 'lambda 2')]),
            ('Discounted costs', [('J1', 'J 1'), ('J2', 'J 2')]),
            ('Return', [('mean_return', 'mean return')]),
        ]),
        'trajectory': ('time', [
            ('Power', [('power', 'power'), ('setpoint', 'setpoint')]),
            ('Secondary temperatures', [('t_hx_s_in', 'inlet'),
                                        ('t_hx_s_out', 'outlet')]),
        ]),
        'scenario': ('t', [
            ('Demand', [('demand', 'demand')]),
            ('Bounds', [('c_in_min', 'inlet minimum'),
                        ('c_out_max', 'outlet maximum')]),
        ]),
    }


def chart_kind(columns: Sequence[str]) -> str:
    """
    Name the chart layout that fits a table.

    :raises ContractError: if no layout fits
    """
    present = set(columns)
    for kind in ('episode', 'epochs', 'trajectory', 'scenario'):
        x, panels = CHART_KINDS[kind]
        needed = {x} | {col for _, lines in panels for col, _ in lines}
        if needed <= present:
            return kind

    raise ContractError('No chart layout for columns {}'.format(
        ', '.join(columns)))


def plot_table(table: RecordTable, path: str, title: str = '') -> str:
    """
    Render a table as an SVG file.

    :returns: the chart kind that was drawn
    """
    if not len(table):
        raise ContractError('Nothing to plot: table is empty')

    kind = chart_kind(table.columns)
    x_name, panels = CHART_KINDS[kind]
    x = table.column(x_name).astype(float)

    with plt.rc_context(_SVG_SETTINGS):
        fig, axes = plt.subplots(len(panels), 1, sharex=True,
                                 figsize=(8, 2.6 * len(panels)))
        axes = np.atleast_1d(axes)

        for ax, (panel_title, lines) in zip(axes, panels):
            for column, label in lines:
                dashed = column.startswith('c_') or column == 'setpoint'
                ax.plot(x, table.column(column).astype(float), label=label,
                        linestyle='--' if dashed else '-', linewidth=1.2)
            ax.set_title(panel_title)
            ax.grid(True, alpha=0.3)
            ax.legend(loc='best', fontsize='small')
        axes[-1].set_xlabel(x_name)

        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, format='svg', metadata={'Date': None})
        plt.close(fig)

    logger.info('Wrote %s chart to %s', kind, path)

    return kind
