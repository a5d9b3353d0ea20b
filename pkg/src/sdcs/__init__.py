"""Simultaneous nucleus detection and cell classification for Ki67-style
immunohistochemistry tiles.

The package pairs a from-scratch hypercolumn segmentation network (detection
+ Ki67-positive/hematoxylin segmentation, then a 4-way center classifier)
with a classical comparison system (morphological segmentation, a
101-element handcrafted descriptor, and an RBF SVM), validated end to end on
a built-in synthetic tile generator with exact ground truth.
"""

__version__ = "0.1.0"
