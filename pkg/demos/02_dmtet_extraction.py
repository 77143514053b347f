"""Extract a mesh from a signed distance grid and push a gradient back to it.

The first training stage represents the shape as SDF values on a tetrahedral
grid. Marching tetrahedra turns the zero level set into triangles, and each
extracted vertex remembers the grid edge it came from, which is what lets a
loss on vertex positions update the SDF values.
"""
import numpy as np

from meshsplat.dmtet import backprop_to_sdf, build_grid, init_sphere_sdf, marching_tets

grid = build_grid(24)
init_sphere_sdf(grid, r=0.6)
mesh, emap = marching_tets(grid)
radii = np.linalg.norm(mesh.vertices, axis=1)
print(f"{len(grid.grid_vertices)} grid vertices, {len(grid.tets)} tets")
print(f"extracted {mesh.n_vertices} vertices / {mesh.n_faces} faces, "
      f"euler characteristic {mesh.euler_characteristic()}")
print(f"vertex radius {radii.min():.4f} .. {radii.max():.4f} (target 0.6)")

# A loss that wants every vertex pushed outward: dL/dv = -v/|v|.
d_sdf = backprop_to_sdf(emap, grid, -mesh.vertices / radii[:, None])
touched = np.flatnonzero(d_sdf)
print(f"{len(touched)} SDF values receive gradient; "
      f"mean sign of gradient {np.sign(d_sdf[touched]).mean():+.2f}")
