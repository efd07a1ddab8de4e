"""
Static figures rendered from the exported tables.
CSV is the canonical artifact; these are conveniences.
"""
import os
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_trajectory(frame: pd.DataFrame, output_dir: str, title: str = "") -> List[str]:
    """|u(t)|, phi(u(t)) and the energy residual against t"""
    paths = []
    for column, label, name in (("norm_u", "|u(t)|_H", "norm_u.png"),
                                ("phi_u", "phi(u(t))", "phi_u.png"),
                                ("energy_residual", "energy residual", "energy_residual.png")):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        ax.plot(frame["t"], frame[column], marker=".", linewidth=1.2)
        ax.set_xlabel("time")
        ax.set_ylabel(label)
        if title:
            ax.set_title(title)
        paths.append(_save(fig, os.path.join(output_dir, name)))
    return paths


def plot_lambda_study(table: pd.DataFrame, output_dir: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.loglog(table["lambda"], table["distance"], marker="o", label="sup |u_lambda - u|")
    for column in ("phi_J", "phi_star_A", "lambda_A2"):
        positive = table[column] > 0
        if positive.any():
            ax.loglog(table["lambda"][positive], table[column][positive], marker=".", label=column)
    ax.set_xlabel("lambda")
    ax.invert_xaxis()
    ax.legend()
    return _save(fig, os.path.join(output_dir, "lambda_convergence.png"))


def plot_refinement(table: pd.DataFrame, output_dir: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    positive = table["max_residual"] > 0
    ax.loglog(table["tau"][positive], table["max_residual"][positive], marker="o", label="max energy residual")
    ax.set_xlabel("tau")
    ax.set_ylabel("max residual")
    ax.legend()
    return _save(fig, os.path.join(output_dir, "tau_refinement.png"))
