"""Run artifacts: tab-delimited metric logs, aligned comparison tables, and
the matplotlib figures rendered next to them."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


METRIC_COLUMNS = ("epoch", "split", "auc", "logloss", "count")


def metric_log_text(records) -> str:
    lines = ["\t".join(METRIC_COLUMNS)]
    for rec in records:
        lines.append("\t".join(_fmt(rec[col]) for col in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def write_metric_log(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(metric_log_text(records))


def render_training_curves(records, path) -> None:
    """Logloss and AUC against epoch for the train/valid splits."""
    numeric = [r for r in records if isinstance(r["epoch"], int)]
    fig, (ax_loss, ax_auc) = plt.subplots(1, 2, figsize=(10, 4))
    for split in ("train", "valid"):
        rows = [r for r in numeric if r["split"] == split]
        if not rows:
            continue
        epochs = [r["epoch"] for r in rows]
        ax_loss.plot(epochs, [r["logloss"] for r in rows], marker="o", ms=3, label=split)
        ax_auc.plot(epochs, [r["auc"] for r in rows], marker="o", ms=3, label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("logloss")
    ax_loss.legend()
    ax_auc.set_xlabel("epoch")
    ax_auc.set_ylabel("AUC")
    ax_auc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_table_text(rows) -> str:
    """Aligned comparison table, inner-product group first."""
    name_w = max([len("model")] + [len(r.name) for r in rows])
    lines = [f"{'model':<{name_w}}  {'auc':>10}  {'logloss':>10}"]
    last_group = None
    for row in rows:
        if last_group is not None and row.interaction != last_group:
            lines.append("-" * len(lines[0]))
        last_group = row.interaction
        if row.error is not None:
            lines.append(f"{row.name:<{name_w}}  failed: {row.error}")
        else:
            lines.append(f"{row.name:<{name_w}}  {row.auc:>10.6f}  {row.logloss:>10.6f}")
    return "\n".join(lines) + "\n"


def ablation_table_tsv(rows) -> str:
    lines = ["model\tinteraction\tauc\tlogloss\tcount\terror"]
    for r in rows:
        lines.append(
            "\t".join(
                [
                    r.name,
                    r.interaction,
                    _fmt(r.auc) if r.auc is not None else "",
                    _fmt(r.logloss) if r.logloss is not None else "",
                    str(r.count),
                    r.error or "",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def render_ablation_chart(rows, path) -> None:
    good = [r for r in rows if r.error is None]
    fig, (ax_auc, ax_loss) = plt.subplots(1, 2, figsize=(11, 0.6 * max(len(good), 4) + 2))
    if good:
        names = [r.name for r in good][::-1]
        ax_auc.barh(names, [r.auc for r in good][::-1], color="tab:blue")
        ax_loss.barh(names, [r.logloss for r in good][::-1], color="tab:orange")
    ax_auc.set_xlabel("AUC")
    ax_loss.set_xlabel("logloss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
