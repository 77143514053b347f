"""Adaptive remeshing: drive a noisy sphere toward a uniform target edge length.

Each call splits long edges, collapses short ones, flips edges toward valence
six and relaxes vertices tangentially. Per-vertex optimizer state rides along
through a provenance matrix so training can continue across topology edits.
"""
import numpy as np

from meshsplat.geometry import icosphere
from meshsplat.remesh import RemeshConfig, RemeshStats, mesh_quality_report, remesh_step
from meshsplat.train import AdamState

rng = np.random.default_rng(0)
mesh = icosphere(3, radius=0.5)
mesh.vertices += rng.normal(scale=0.01, size=mesh.vertices.shape)
state = {"positions": AdamState.like(mesh.vertices, per_row=True)}
cfg = RemeshConfig(target_edge=0.06)

print("call  verts  faces  splits collapses flips  min-q   edge mean")
for call in range(1, 21):
    stats = RemeshStats()
    mesh, state = remesh_step(mesh, state, cfg, stats)
    if call in (1, 2, 5, 10, 20):
        q = mesh_quality_report(mesh)
        print(f"{call:4d} {q.vertices:6d} {q.faces:6d} {stats.splits:7d} {stats.collapses:9d} "
              f"{stats.flips:5d}  {q.min_quality:.3f}  {q.edge_mean:.4f}")
print("optimizer state rows:", state["positions"].m.shape[0], "== vertices:", mesh.n_vertices)
