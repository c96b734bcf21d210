import hashlib
import logging
from pathlib import Path

logger = logging.getLogger(__name__)

BAND_COLORS = ("#DCE9F5", "#B4D0EA", "#84B2DD")


def series_color(label):
    """Stable colour per series name"""
    tag_hash = int(hashlib.md5(label.encode()).hexdigest()[:6], 16)
    return f"#{(tag_hash >> 16) & 255:02X}{(tag_hash >> 8) & 255:02X}{tag_hash & 255:02X}"


class PlotScriptWriter:
    """Emits gnuplot scripts next to the CSV files they read"""

    def __init__(self, output_dir):
        self.output_dir = Path(output_dir)

    def _header(self, output_png, rows, cols=1, width=1000, height=None):
        height = height or 350 * rows
        return [
            "set datafile separator ','",
            f"set terminal pngcairo size {width},{height}",
            f"set output '{output_png}'",
            f"set multiplot layout {rows},{cols}",
        ]

    def _write(self, lines, name):
        target = self.output_dir / name
        target.write_text("\n".join(lines) + "\n", encoding="utf-8")
        logger.info("wrote plot script %s", target)
        return target

    def ensemble_script(self, dimension, method, summary="ensemble_summary.csv", members="ensemble.csv",
                        reference="reference.csv", deterministic="deterministic.csv", name="ensemble.gp"):
        """Per component: every member point with the deterministic path on top,
        then mean with 1/2/3 sigma bands and the reference in black"""
        lines = self._header("ensemble.png", 2 * dimension)
        for k in range(1, dimension + 1):
            mean, std, ref = 2 * k, 2 * k + 1, k + 1
            # ensemble.csv columns: rep, t, z_1..z_d
            lines += [
                f"set title '{method}: ensemble members, component {k}'",
                "set xlabel 't'",
                f"set ylabel 'z_{k}'",
                f"plot '{members}' every ::1 using 2:{k + 2} with points pt 7 ps 0.2 lc rgb '#80808080' "
                "title 'members', \\",
                f"     '{deterministic}' every ::1 using 1:{ref} with lines lw 2 lc rgb '#5DADE2' "
                "title 'deterministic'",
                f"set title '{method}: component {k}'",
                f"plot '{summary}' every ::1 using 1:(${mean}-3*${std}):(${mean}+3*${std}) "
                f"with filledcurves fc rgb '{BAND_COLORS[0]}' title '3 sigma', \\",
                f"     '' every ::1 using 1:(${mean}-2*${std}):(${mean}+2*${std}) "
                f"with filledcurves fc rgb '{BAND_COLORS[1]}' title '2 sigma', \\",
                f"     '' every ::1 using 1:(${mean}-${std}):(${mean}+${std}) "
                f"with filledcurves fc rgb '{BAND_COLORS[2]}' title '1 sigma', \\",
                f"     '' every ::1 using 1:{mean} with lines dt 2 lc rgb 'black' title 'mean', \\",
                f"     '{deterministic}' every ::1 using 1:{ref} with lines lc rgb '#5DADE2' title 'deterministic', \\",
                f"     '{reference}' every ::1 using 1:{ref} with lines lw 2 lc rgb 'black' title 'reference'",
            ]
        lines.append("unset multiplot")
        return self._write(lines, name)

    def posterior_script(self, panels, burn_in, thin, truth=None, components=(2, 3), name="posterior.gp"):
        """Sample clouds of two parameters (1-based ``components``), or a
        trace when only one is given; ``panels`` maps (method, h) to a chain CSV"""
        methods = sorted({m for m, _ in panels})
        steps = sorted({h for _, h in panels})
        lines = self._header("posterior.png", len(methods), len(steps), width=350 * len(steps))
        # chain CSV columns: iter, theta1..thetaq, logpost, accepted
        if len(components) == 1:
            (k,) = components
            x_label, x_col, y_col = "iteration", 1, k + 1
            marks = [None, truth[k - 1] if truth is not None else None]
        else:
            a, b = components
            x_label, x_col, y_col = f"theta{a}", a + 1, b + 1
            marks = [truth[a - 1], truth[b - 1]] if truth is not None else [None, None]
        y_label = f"theta{components[-1]}"
        for method in methods:
            for h in steps:
                chain = panels.get((method, h))
                if chain is None:
                    lines.append("set multiplot next")
                    continue
                lines += [
                    f"set title '{method}, h={h:g}'",
                    f"set xlabel '{x_label}'",
                    f"set ylabel '{y_label}'",
                ]
                if marks[0] is not None:
                    lines.append(f"set arrow 1 from {marks[0]}, graph 0 to {marks[0]}, graph 1 nohead dt 2")
                if marks[1] is not None:
                    lines.append(f"set arrow 2 from graph 0, first {marks[1]} to graph 1, first {marks[1]} nohead dt 2")
                lines.append(
                    f"plot '{Path(chain).name}' every {thin}::{burn_in + 1} using {x_col}:{y_col} "
                    f"with points pt 7 ps 0.3 lc rgb '{series_color(method)}' notitle"
                )
        lines.append("unset multiplot")
        return self._write(lines, name)

    def convergence_script(self, method, data="convergence.csv", name="convergence.gp"):
        lines = self._header("convergence.png", 1, height=500) + [
            "set logscale xy",
            "set xlabel 'h'",
            "set ylabel 'RMS terminal error'",
            f"set title '{method}'",
            f"plot '{data}' every ::1 using 1:2 with linespoints lc rgb '{series_color(method)}' title '{method}'",
            "unset multiplot",
        ]
        return self._write(lines, name)
