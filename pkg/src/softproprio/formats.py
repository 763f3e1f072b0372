"""ASCII PLY and binary PGM readers/writers."""

from __future__ import annotations

import os

import numpy as np


class FormatError(ValueError):
    pass


def _fmt(v: float) -> str:
    return format(float(np.float32(v)), ".9g")


def write_ply(path, points, comments=()) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines += [
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines += [" ".join(_fmt(v) for v in p) for p in pts]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_header(path, text: str):
    lines = text.split("\n")
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: byte 0: expected 'ply' magic")
    offset = len(lines[0]) + 1
    elements: list[tuple[str, int, list[str]]] = []
    comments: list[str] = []
    for i, line in enumerate(lines[1:], start=1):
        tokens = line.split()
        if not tokens:
            offset += len(line) + 1
            continue
        key = tokens[0]
        if key == "format":
            if tokens[1:2] != ["ascii"]:
                raise FormatError(f"{path}: byte {offset}: only ASCII PLY is supported")
        elif key == "comment":
            comments.append(line[len("comment "):].strip())
        elif key == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif key == "property":
            if not elements:
                raise FormatError(f"{path}: byte {offset}: property before element")
            elements[-1][2].append(tokens[-1])
        elif key == "end_header":
            return elements, comments, lines[i + 1 :], offset + len(line) + 1
        else:
            raise FormatError(f"{path}: byte {offset}: unexpected header line {line!r}")
        offset += len(line) + 1
    raise FormatError(f"{path}: byte {offset}: missing end_header")


def read_ply(path, with_faces: bool = False):
    """Read vertices (and optionally faces and header comments) from ASCII PLY."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: cannot read PLY: {exc}") from exc
    elements, comments, body, offset = _read_header(path, text)
    vertices = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    row = 0
    for name, count, props in elements:
        chunk = body[row : row + count]
        if len(chunk) < count or any(not c.strip() for c in chunk):
            raise FormatError(f"{path}: byte {offset}: truncated {name} block")
        try:
            if name == "vertex":
                table = np.array([c.split() for c in chunk], dtype=np.float64).reshape(count, -1)
                cols = [props.index(a) for a in ("x", "y", "z")]
                # properties are declared float32; 9 significant digits restore them exactly
                vertices = table[:, cols].astype(np.float32).astype(np.float64)
            elif name == "face":
                table = np.array([c.split() for c in chunk], dtype=np.int64).reshape(count, -1)
                if count and np.any(table[:, 0] != 3):
                    raise FormatError(f"{path}: byte {offset}: only triangles are supported")
                faces = table[:, 1:4]
        except ValueError as exc:
            raise FormatError(f"{path}: byte {offset}: malformed {name} data ({exc})") from exc
        offset += sum(len(c) + 1 for c in chunk)
        row += count
    if with_faces:
        return vertices, faces, comments
    return vertices


def write_mesh_ply(path, vertices, faces, face_blocks: dict[str, tuple[int, int]]) -> None:
    """Write a triangle mesh; ``face_blocks`` maps a surface tag to ``(start, count)``."""
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(faces, dtype=np.int64)
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment surface {tag} {start} {count}" for tag, (start, count) in face_blocks.items()]
    lines += [
        f"element vertex {len(verts)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(tris)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [" ".join(_fmt(v) for v in p) for p in verts]
    lines += [f"3 {a} {b} {c}" for a, b, c in tris]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh_ply(path):
    """Return ``(vertices, faces, face_blocks)`` written by :func:`write_mesh_ply`."""
    verts, faces, comments = read_ply(path, with_faces=True)
    blocks = {}
    for c in comments:
        tokens = c.split()
        if len(tokens) == 4 and tokens[0] == "surface":
            blocks[tokens[1]] = (int(tokens[2]), int(tokens[3]))
    return verts, faces, blocks


def write_pgm(path, image) -> None:
    """Write a 2-D array as binary PGM (P5, maxval 255).

    Binary {0, 1} images are stored as {0, 255}.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError("PGM images must be 2-D")
    if img.dtype == bool or (img.size and img.max() <= 1 and np.issubdtype(img.dtype, np.integer)):
        data = img.astype(np.uint8) * 255
    else:
        data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a ``uint8`` array of shape ``(height, width)``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read PGM: {exc}") from exc
    if raw[:2] != b"P5":
        raise FormatError(f"{path}: byte 0: expected P5")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: byte {pos}: malformed PGM header")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte before raster
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: byte {pos}: only maxval 255 is supported")
    need = w * h
    if len(raw) - pos < need:
        raise FormatError(f"{path}: byte {len(raw)}: truncated raster, expected {need} bytes")
    return np.frombuffer(raw[pos : pos + need], dtype=np.uint8).reshape(h, w).copy()


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
