"""Turn raw head outputs into oriented detections."""
import math

import torch
import torch.nn.functional as F

from ..geometry import Detection, Septet, canonical_angle

MIN_SIZE = 1e-3


def local_peaks(heat, kernel=3):
    hmax = F.max_pool2d(heat, kernel, stride=1, padding=kernel // 2)
    return heat * (hmax == heat).to(heat.dtype)


def decode(pred, stride=4, top_k=300, score_floor=None):
    """Decode a batch of raw predictions into per-image detection lists.

    Peaks of the sigmoid heatmap (3x3 local maxima) are ranked across all
    classes and the ``top_k`` best are turned into boxes at input
    resolution. With ``score_floor`` set, weaker peaks are dropped.
    """
    with torch.no_grad():
        heat = local_peaks(torch.sigmoid(pred["heatmap"].detach().double()))
        n, c, h, w = heat.shape
        k = min(top_k, c * h * w)
        scores, idx = heat.reshape(n, -1).topk(k, dim=1)
        results = []
        for b in range(n):
            size = pred["size"][b].detach().double()
            off = pred["offset"][b].detach().double()
            ang = pred["angle"][b].detach().double()
            dets = []
            for score, i in zip(scores[b].tolist(), idx[b].tolist()):
                if score_floor is not None and score < score_floor:
                    break
                cls, rem = divmod(i, h * w)
                y, x = divmod(rem, w)
                theta = float(ang[0, y, x])
                if not math.isfinite(theta):
                    continue
                bw = max(float(size[0, y, x]) * stride, MIN_SIZE)
                bh = max(float(size[1, y, x]) * stride, MIN_SIZE)
                box = Septet(x * stride, y * stride, bw, bh, canonical_angle(theta),
                             float(off[0, y, x]) * stride, float(off[1, y, x]) * stride)
                dets.append(Detection(box, cls, min(1.0, max(0.0, score))))
            results.append(dets)
    return results
