"""Space-time adaptive finite elements for linear parabolic problems on polygons."""
