"""Reference computations that share no code with the package under test."""

import numpy as np
from shapely.geometry import Polygon
from shapely.ops import triangulate
from shapely.strtree import STRtree

_GL_X, _GL_W = np.polynomial.legendre.leggauss(6)


def hat_values(nodes, x):
    """Dense matrix ``phi[i, q]`` of 1D P1 hats evaluated at ``x``."""
    eye = np.eye(len(nodes))
    return np.array([np.interp(x, nodes, eye[i]) for i in range(len(nodes))])


def coupling_1d(fine_nodes, coarse_nodes):
    """``int phi_i Phi_J`` with 6-point Gauss on every interval of the merged breakpoints."""
    pts = np.union1d(fine_nodes, coarse_nodes)
    a, b = pts[:-1], pts[1:]
    x = (0.5 * (b - a)[:, None] * _GL_X[None, :] + 0.5 * (a + b)[:, None]).ravel()
    w = (0.5 * (b - a)[:, None] * _GL_W[None, :]).ravel()
    return (hat_values(fine_nodes, x) * w) @ hat_values(coarse_nodes, x).T


def mass_1d(nodes):
    return coupling_1d(nodes, nodes)


def _duffy_rule(n=5):
    """Collapsed Gauss rule on the reference triangle, exact to degree 2n - 2."""
    x, w = np.polynomial.legendre.leggauss(n)
    u, wu = 0.5 * (x + 1), 0.5 * w
    U, V = np.meshgrid(u, u, indexing="ij")
    WU, WV = np.meshgrid(wu, wu, indexing="ij")
    r = U.ravel()
    s = (V * (1 - U)).ravel()
    wt = (WU * WV * (1 - U)).ravel()
    return np.column_stack([r, s]), wt


_REF_PTS, _REF_W = _duffy_rule()


def _barycentric(tri, pts):
    T = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    ls = np.linalg.solve(T, (pts - tri[0]).T).T
    return np.column_stack([1 - ls.sum(axis=1), ls])


def coupling_2d(fine, coarse):
    """``int phi_i Phi_J`` by polygon clipping in shapely and collapsed Gauss."""
    B = np.zeros((fine.n_nodes, coarse.n_nodes))
    c_tris = [coarse.nodes[t] for t in coarse.triangles]
    c_polys = [Polygon(t) for t in c_tris]
    tree = STRtree(c_polys)
    for ft in fine.triangles:
        f_xy = fine.nodes[ft]
        fp = Polygon(f_xy)
        for k in tree.query(fp):
            piece = fp.intersection(c_polys[k])
            if piece.is_empty or piece.area <= 0:
                continue
            ct = coarse.triangles[k]
            for sub in triangulate(piece):
                if not piece.contains(sub.representative_point()):
                    continue
                v = np.asarray(sub.exterior.coords)[:3]
                e1, e2 = v[1] - v[0], v[2] - v[0]
                area = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
                pts = v[0] + _REF_PTS @ np.vstack([v[1] - v[0], v[2] - v[0]])
                wts = 2.0 * area * _REF_W
                pf = _barycentric(f_xy, pts)
                pc = _barycentric(c_tris[k], pts)
                B[np.ix_(ft, ct)] += (pf * wts[:, None]).T @ pc
    return B


def mass_2d(mesh):
    return coupling_2d(mesh, mesh)


def central_difference(f, params, h=1e-6):
    """Gradient of ``f()`` with respect to every entry of the arrays in ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads
