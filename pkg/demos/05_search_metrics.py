"""
Person-search metrics
=====================

Re-ID mAP averages the area under each query's precision-recall curve over
a ranked gallery. CMC top-k asks whether any match appears in the first k.
Detection AP scores the detector alone at IoU 0.5.
"""

import numpy as np

from kdsearch.metrics import cmc_at_k, detection_ap_recall, query_ap

# a gallery ranked by similarity: True marks the query's identity
ranked = [False, True, False, True, False]
print("AP  %.4f" % query_ap(ranked, 2))  # (1/2 + 2/4) / 2
print("AP when one match was never detected %.4f" % query_ap(ranked, 3))
print("CMC@1", cmc_at_k(ranked, 1), "CMC@2", cmc_at_k(ranked, 2))

# a confident false positive ahead of the true detection halves the AP
gt = [np.array([[0.0, 0.0, 10.0, 10.0]])]
preds = [(np.array([[50.0, 50.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]]), np.array([0.9, 0.4]))]
print("detection AP %.2f, recall %.2f" % detection_ap_recall(preds, gt))
