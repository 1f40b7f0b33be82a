"""Feature point cloud coding with unequal-protection transmission."""
