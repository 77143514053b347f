"""Per-vertex color model: raw RGB reals squashed through a logistic.

Colors live on base vertices and are shared by every softened layer, so an
interpolated fragment color depends on face and barycentrics only.  Anything
richer (a feature MLP, view dependence) can replace ``vertex_color`` and its
backward without touching the renderer.
"""
import numpy as np


def vertex_color(raw):
    raw = np.asarray(raw, dtype=np.float64)
    # two-sided form avoids overflow in exp for large |raw|
    out = np.empty_like(raw)
    pos = raw >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-raw[pos]))
    e = np.exp(raw[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def vertex_color_backward(raw, dL_dc):
    c = vertex_color(raw)
    return np.asarray(dL_dc, dtype=np.float64) * c * (1.0 - c)


def color_to_raw(c, eps=1e-6):
    """Inverse squash, clipped so saturated colors stay finite."""
    c = np.clip(np.asarray(c, dtype=np.float64), eps, 1 - eps)
    return np.log(c) - np.log1p(-c)
