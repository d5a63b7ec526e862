"""Legacy ASCII VTK export of a triangulation with a nodal scalar field."""

from pathlib import Path

import numpy as np

from stafem.errors import InputError


def write_vtk(path, mesh, values=None, name="u", title="stafem snapshot"):
    """Write ``mesh`` (and optionally one value per mesh vertex) as an unstructured grid.

    Parameters
    ----------
    path : str or Path
    mesh : Mesh
    values : array_like, optional
        Vertex values in the order of ``mesh.points``.
    """
    pts = mesh.points
    cells = mesh.cells
    if values is not None:
        values = np.asarray(values, dtype=float)
        if values.shape != (len(pts),):
            raise InputError(f"expected {len(pts)} vertex values, got {values.shape}")
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {len(pts)} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in pts]
    lines.append(f"CELLS {len(cells)} {4 * len(cells)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += ["5"] * len(cells)
    if values is not None:
        lines += [f"POINT_DATA {len(pts)}", f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [f"{v:.17g}" for v in values]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_vtk(path):
    """Read back points, triangles and the first scalar field written by :func:`write_vtk`."""
    tokens = Path(path).read_text().split("\n")
    it = iter(tokens)
    points = cells = values = None
    for line in it:
        head = line.split()
        if not head:
            continue
        if head[0] == "POINTS":
            n = int(head[1])
            points = np.array([[float(v) for v in next(it).split()[:2]] for _ in range(n)])
        elif head[0] == "CELLS":
            n = int(head[1])
            cells = np.array([[int(v) for v in next(it).split()[1:]] for _ in range(n)])
        elif head[0] == "LOOKUP_TABLE" and points is not None:
            values = np.array([float(next(it)) for _ in range(len(points))])
    if points is None or cells is None:
        raise InputError(f"{path} is not a legacy VTK unstructured grid")
    return points, cells, values
