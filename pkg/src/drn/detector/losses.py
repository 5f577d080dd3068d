import torch
import torch.nn.functional as F


def focal_loss(logits, target, alpha=2, beta=4):
    """Penalty-reduced pixelwise focal loss on heatmap logits, normalised by the positive count."""
    pos = target.eq(1).to(logits.dtype)
    neg = 1 - pos
    log_p = F.logsigmoid(logits)
    log_1mp = F.logsigmoid(-logits)
    p = torch.sigmoid(logits)
    pos_loss = (torch.pow(1 - p, alpha) * log_p * pos).sum()
    neg_loss = (torch.pow(1 - target, beta) * torch.pow(p, alpha) * log_1mp * neg).sum()
    num_pos = pos.sum()
    if num_pos == 0:
        return -neg_loss
    return -(pos_loss + neg_loss) / num_pos


def masked_l1(pred, target, mask):
    """Mean absolute error per component over positive cells; 0 without positives."""
    m = mask.expand_as(pred)
    denom = m.sum()
    if denom == 0:
        return pred.sum() * 0
    return ((pred - target).abs() * m).sum() / denom


def loss_angle(pred_angle, targets):
    return masked_l1(pred_angle, targets["angle"], targets["mask"])


def loss_total(pred, targets, config):
    """Weighted detection objective; returns ``(total, breakdown)``."""
    terms = {
        "heatmap": focal_loss(pred["heatmap"], targets["heatmap"]),
        "size": masked_l1(pred["size"], targets["size"], targets["mask"]),
        "offset": masked_l1(pred["offset"], targets["offset"], targets["mask"]),
        "angle": loss_angle(pred["angle"], targets),
    }
    total = (terms["heatmap"] + config.lambda_size * terms["size"] + config.lambda_off * terms["offset"]
             + config.lambda_ang * terms["angle"])
    return total, terms
