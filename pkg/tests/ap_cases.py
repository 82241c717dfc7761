"""Constructed detection sets with hand-integrated AP values.

Boxes are 4 x 2 m cars facing +x. Shifting a copy by dx metres along x gives
IoU = 2(4 - dx) / (16 - 2(4 - dx)): 1 m -> 0.6, 2 m -> 1/3, 3 m -> 1/7.
Expected values come from writing out the precision/recall table by hand and
summing recall steps times the precision envelope.
"""
from collabdet.head import Detection
from collabdet.scenesim import CAR, PEDESTRIAN, GroundTruthBox


def gt(x, cls=CAR):
    return GroundTruthBox((x, 0.0, 0.75), (4.0, 2.0, 1.5), 0.0, cls)


def det(x, score, cls=CAR):
    return Detection((x, 0.0, 0.75), (4.0, 2.0, 1.5), 0.0, cls, score)


# name, per-scene detections, per-scene ground truth, IoU threshold, class, range, expected AP
CASES = [
    ("exact hit", [[det(0, 0.9)]], [[gt(0)]], 0.5, CAR, None, 1.0),
    ("iou 1/7 misses at 0.3", [[det(3, 0.9)]], [[gt(0)]], 0.3, CAR, None, 0.0),
    ("iou 1/3 hits at 0.3", [[det(2, 0.9)]], [[gt(0)]], 0.3, CAR, None, 1.0),
    ("iou 1/3 misses at 0.5", [[det(2, 0.9)]], [[gt(0)]], 0.5, CAR, None, 0.0),
    # TP then duplicate FP: recall reaches 1 at precision 1
    ("duplicate after hit", [[det(0, 0.9), det(1, 0.8)]], [[gt(0)]], 0.5, CAR, None, 1.0),
    # FP then TP: recall 1 at precision 1/2
    ("false positive first", [[det(30, 0.9), det(0, 0.8)]], [[gt(0)]], 0.5, CAR, None, 0.5),
    # TP, FP, TP over 2 gt: 0.5 * 1 + 0.5 * 2/3
    ("two objects", [[det(0, 0.9), det(30, 0.8), det(10, 0.7)]], [[gt(0), gt(10)]], 0.5, CAR, None, 5 / 6),
    ("class mismatch", [[det(0, 0.9, PEDESTRIAN)]], [[gt(0)]], 0.5, CAR, None, 0.0),
    ("no ground truth", [[det(0, 0.9)]], [[]], 0.5, CAR, None, None),
    # pooled over scenes: FP 0.9 (scene 2) then TP 0.6 (scene 1), 2 gt -> 0.5 * 0.5
    ("two scenes", [[det(0, 0.6)], [det(30, 0.9)]], [[gt(0)], [gt(10)]], 0.5, CAR, None, 0.25),
    # the second object lies outside the range window and is ignored, as is the far FP
    ("range window", [[det(0, 0.5), det(30, 0.9)]], [[gt(0), gt(10)]], 0.5, CAR, (-8.0, 8.0), 1.0),
    # precision 1, 1/2, 1/3, 1/2, 3/5 at recalls 1/4, 1/4, 1/4, 1/2, 3/4: 0.25 + 0.25 * 0.6 * 2
    ("envelope", [[det(0, 0.9), det(40, 0.8), det(50, 0.7), det(10, 0.6), det(20, 0.5)]],
     [[gt(0), gt(10), gt(20), gt(60)]], 0.5, CAR, None, 0.55),
]
