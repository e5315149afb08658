"""mapforge: self-supervised registration of 2D LiDAR scans into one map.

Pipeline: simulate (or ingest) scans, warm-start global poses with
incremental ICP, organize frames into anchor+neighbor batches via a map
topology, then optimize localization and occupancy networks against
occupancy, Chamfer, and pose-consistency objectives.
"""

__version__ = "0.1.0"
