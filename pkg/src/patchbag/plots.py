"""Self-contained SVG emitters (no display server, no plotting deps)."""


def _esc(text: str) -> str:
    return (
        str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
    )


def attention_bars_svg(tag_weights, task_names) -> str:
    """One row of bars per task; bar height is the patch attention weight."""
    bar_w = 12
    row_h = 90
    pad = 40
    n_patches = max((len(w) for w in tag_weights), default=0)
    width = pad + n_patches * bar_w + 10
    height = len(tag_weights) * row_h + 10
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for row, (name, weights) in enumerate(zip(task_names, tag_weights)):
        base = (row + 1) * row_h
        top = row * row_h + 15
        peak = max(max(weights), 1e-12)
        parts.append(
            f'<text x="4" y="{top}" font-size="11" font-family="sans-serif">'
            f"{_esc(name)}</text>"
        )
        for i, w in enumerate(weights):
            h = (row_h - 25) * (w / peak)
            x = pad + i * bar_w
            parts.append(
                f'<rect x="{x}" y="{base - 5 - h:.2f}" width="{bar_w - 2}" '
                f'height="{h:.2f}" fill="#4878a8"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts)


def confusion_svg(matrix, class_names, title: str = "") -> str:
    """Row-normalized confusion matrix as a shaded grid with value labels."""
    n = len(class_names)
    cell = 34 if n <= 8 else 26
    label_w = 90
    top = 50
    width = label_w + n * cell + 10
    height = top + n * cell + label_w
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{label_w}" y="18" font-size="13" font-family="sans-serif">'
        f"{_esc(title)}</text>",
    ]
    for i in range(n):
        y = top + i * cell
        parts.append(
            f'<text x="{label_w - 6}" y="{y + cell * 0.65:.1f}" font-size="9" '
            f'font-family="sans-serif" text-anchor="end">{_esc(class_names[i])}</text>'
        )
        x = label_w + i * cell
        parts.append(
            f'<text x="{x + cell * 0.5:.1f}" y="{top + n * cell + 10}" font-size="9" '
            f'font-family="sans-serif" text-anchor="start" '
            f'transform="rotate(60 {x + cell * 0.5:.1f} {top + n * cell + 10})">'
            f"{_esc(class_names[i])}</text>"
        )
    for i in range(n):
        for j in range(n):
            v = float(matrix[i][j])
            shade = int(round(255 * (1.0 - 0.85 * v)))
            x = label_w + j * cell
            y = top + i * cell
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({shade},{shade},255)" stroke="#ccc"/>'
            )
            if v > 0:
                parts.append(
                    f'<text x="{x + cell * 0.5:.1f}" y="{y + cell * 0.62:.1f}" '
                    f'font-size="8" font-family="sans-serif" text-anchor="middle">'
                    f"{v:.2f}</text>"
                )
    parts.append("</svg>")
    return "\n".join(parts)
