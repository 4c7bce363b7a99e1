"""Minimal Wavefront OBJ reader/writer (``v`` and ``f`` records only)."""

from pathlib import Path

import numpy as np

from .model import Mesh


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                # accepts v, v/vt, v/vt/vn, v//vn; fans polygons into triangles
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if len(idx) < 3:
                    raise ValueError(f"{path}:{lineno}: face needs 3 indices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise ValueError(f"{path}: no vertices")
    return Mesh(np.array(verts, dtype=float), np.array(faces, dtype=np.int64).reshape(-1, 3))


def format_obj(mesh):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return "\n".join(lines) + "\n"


def write_obj(mesh, path):
    Path(path).write_text(format_obj(mesh))
