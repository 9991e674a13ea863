"""fsa-yolo - desk-scale YOLOv5-style detection with full-separation attention."""
