#include "vf/detect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vf {

namespace {

bool inside_box3d(const Box3D& b, double x, double y, double z) {
  return std::abs(x - b.x) <= 0.5 * b.l && std::abs(y - b.y) <= 0.5 * b.w &&
         std::abs(z - b.z) <= 0.5 * b.h;
}

bool inside_box2d(const Box2D& b, double u, double v) {
  return u >= b.u_min && u <= b.u_max && v >= b.v_min && v <= b.v_max;
}

double sigmoid_value(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Head3dParams Head3dParams::init(int64_t c_bev, std::span<const Box3D> anchors, Rng& rng) {
  Head3dParams p;
  p.n_classes = static_cast<int>(anchors.size());
  p.anchors.assign(anchors.begin(), anchors.end());
  int64_t out_ch = static_cast<int64_t>(p.n_classes) * 8;
  p.w = Tensor::glorot({out_ch, c_bev, 1, 1}, c_bev, out_ch, rng);
  p.b = Tensor::zeros({out_ch}, true);
  return p;
}

Head3dOut head3d_forward(const Tensor& bev, const Head3dParams& params) {
  return Head3dOut{add_channel_bias(conv2d(bev, params.w, 1, 0), params.b)};
}

namespace {

// Channel layout: [0, C) class logits, then per class c a block of 7 at
// C + 7c: objectness followed by 6 residuals.
struct CellView {
  const Head3dOut& out;
  int64_t X, Y;
  int C;

  double at(int64_t ch, int64_t ix, int64_t iy) const {
    return out.map.data()[static_cast<size_t>((ch * X + ix) * Y + iy)];
  }
};

Box3D anchor_at(const Head3dParams& params, const VoxelGridSpec& spec, int cls, int64_t ix,
                int64_t iy) {
  Box3D a = params.anchors[static_cast<size_t>(cls)];
  a.x = spec.min[0] + (static_cast<double>(ix) + 0.5) * spec.voxel_size[0];
  a.y = spec.min[1] + (static_cast<double>(iy) + 0.5) * spec.voxel_size[1];
  a.class_id = cls;
  return a;
}

}  // namespace

std::vector<DetectionBox3D> head3d_decode(const Head3dOut& out, const VoxelGridSpec& spec,
                                          const Head3dParams& params, double score_thresh,
                                          double nms_iou) {
  auto ext = spec.extents();
  int C = params.n_classes;
  CellView view{out, ext[0], ext[1], C};
  std::vector<DetectionBox3D> all;
  for (int64_t ix = 0; ix < ext[0]; ++ix) {
    for (int64_t iy = 0; iy < ext[1]; ++iy) {
      for (int c = 0; c < C; ++c) {
        int64_t base = C + 7 * c;
        // the box score is the anchor's objectness; class logits only feed
        // the training-time cross-entropy
        double score = sigmoid_value(view.at(base, ix, iy));
        if (score < score_thresh) continue;
        Box3D a = anchor_at(params, spec, c, ix, iy);
        Box3D b = a;
        b.x += view.at(base + 1, ix, iy);
        b.y += view.at(base + 2, ix, iy);
        b.z += view.at(base + 3, ix, iy);
        b.l = std::max(0.05, a.l + view.at(base + 4, ix, iy));
        b.w = std::max(0.05, a.w + view.at(base + 5, ix, iy));
        b.h = std::max(0.05, a.h + view.at(base + 6, ix, iy));
        all.push_back(DetectionBox3D{b, score});
      }
    }
  }
  // per-class NMS, then merge
  std::vector<DetectionBox3D> kept;
  for (int c = 0; c < C; ++c) {
    std::vector<DetectionBox3D> cls_boxes;
    for (const auto& d : all) {
      if (d.box.class_id == c) cls_boxes.push_back(d);
    }
    auto pruned = nms_3d(std::move(cls_boxes), nms_iou);
    kept.insert(kept.end(), pruned.begin(), pruned.end());
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.score > b.score; });
  return kept;
}

std::pair<Tensor, Tensor> loss3d(const Head3dOut& out, std::span<const Box3D> gts,
                                 const VoxelGridSpec& spec, const Head3dParams& params) {
  auto ext = spec.extents();
  int64_t X = ext[0], Y = ext[1];
  int C = params.n_classes;
  int64_t plane = X * Y;

  // objectness targets for every class anchor, positives per cell
  std::vector<double> obj_targets(static_cast<size_t>(C * plane), 0.0);
  struct Positive {
    int64_t cell;
    int cls;
    const Box3D* gt;
  };
  std::vector<Positive> positives;
  for (int64_t ix = 0; ix < X; ++ix) {
    for (int64_t iy = 0; iy < Y; ++iy) {
      for (int c = 0; c < C; ++c) {
        Box3D a = anchor_at(params, spec, c, ix, iy);
        for (const Box3D& gt : gts) {
          if (gt.class_id == c && inside_box3d(gt, a.x, a.y, a.z)) {
            obj_targets[static_cast<size_t>(c * plane + ix * Y + iy)] = 1.0;
            positives.push_back(Positive{ix * Y + iy, c, &gt});
            break;
          }
        }
      }
    }
  }

  // objectness BCE over all cells and class anchors
  std::vector<Tensor> obj_slices;
  for (int c = 0; c < C; ++c) {
    obj_slices.push_back(reshape(slice(out.map, 0, C + 7 * c, C + 7 * c + 1), {plane}));
  }
  Tensor obj_logits = concat(obj_slices, 0);
  Tensor obj_t = Tensor::from_data({static_cast<int64_t>(C) * plane}, obj_targets);
  Tensor cls_loss = mean(bce_with_logits(obj_logits, obj_t));

  Tensor reg_loss = Tensor::scalar(0.0);
  if (!positives.empty()) {
    // class cross-entropy at positive cells
    std::vector<std::array<int64_t, 2>> cells;
    std::vector<int64_t> cls_targets;
    for (const auto& p : positives) {
      cells.push_back({p.cell / Y, p.cell % Y});
      cls_targets.push_back(p.cls);
    }
    Tensor cls_map = slice(out.map, 0, 0, C);
    Tensor cls_rows = gather_cells(cls_map, cells);  // [n x C]
    Tensor ce = mean(cross_entropy_rows(cls_rows, cls_targets));
    cls_loss = add(cls_loss, ce);

    // residual regression at positive cells
    std::vector<Tensor> pred_rows;
    std::vector<double> target_rows;
    for (const auto& p : positives) {
      int64_t base = C + 7 * p.cls;
      Tensor res_map = slice(out.map, 0, base + 1, base + 7);  // [6 x X x Y]
      std::vector<std::array<int64_t, 2>> one{{p.cell / Y, p.cell % Y}};
      pred_rows.push_back(gather_cells(res_map, one));  // [1 x 6]
      Box3D a = anchor_at(params, spec, p.cls, p.cell / Y, p.cell % Y);
      target_rows.push_back(p.gt->x - a.x);
      target_rows.push_back(p.gt->y - a.y);
      target_rows.push_back(p.gt->z - a.z);
      target_rows.push_back(p.gt->l - a.l);
      target_rows.push_back(p.gt->w - a.w);
      target_rows.push_back(p.gt->h - a.h);
    }
    Tensor preds = pred_rows.size() == 1 ? pred_rows[0] : concat(pred_rows, 0);
    Tensor targets = Tensor::from_data({static_cast<int64_t>(positives.size()), 6}, target_rows);
    reg_loss = scale(sum(smooth_l1(preds, targets)), 1.0 / static_cast<double>(positives.size()));
  }
  return {cls_loss, reg_loss};
}

// ---- 2D head ------------------------------------------------------------------

Head2dParams Head2dParams::init(int64_t c_in, int n_classes, int roi_out, Rng& rng) {
  Head2dParams p;
  p.n_classes = n_classes;
  p.roi_out = roi_out;
  p.rpn_w = Tensor::glorot({5, c_in, 1, 1}, c_in, 5, rng);
  p.rpn_b = Tensor::zeros({5}, true);
  int64_t pooled = static_cast<int64_t>(roi_out) * roi_out * c_in;
  int64_t hidden = 64;
  int64_t out_dim = n_classes + 1 + 4;
  p.rcnn_w1 = Tensor::glorot({pooled, hidden}, pooled, hidden, rng);
  p.rcnn_b1 = Tensor::zeros({hidden}, true);
  p.rcnn_w2 = Tensor::glorot({hidden, out_dim}, hidden, out_dim, rng);
  p.rcnn_b2 = Tensor::zeros({out_dim}, true);
  return p;
}

std::vector<Tensor*> Head2dParams::parameters() {
  return {&rpn_w, &rpn_b, &rcnn_w1, &rcnn_b1, &rcnn_w2, &rcnn_b2};
}

namespace {

Box2D rpn_anchor(const Head2dParams& params, int stride, int64_t y, int64_t x) {
  double cu = (static_cast<double>(x) + 0.5) * stride;
  double cv = (static_cast<double>(y) + 0.5) * stride;
  double half = 0.5 * params.anchor_size;
  return Box2D{cu - half, cv - half, cu + half, cv + half, 0};
}

Box2D apply_deltas(const Box2D& a, double dx, double dy, double dw, double dh) {
  double aw = a.width(), ah = a.height();
  double cx = 0.5 * (a.u_min + a.u_max) + dx * aw;
  double cy = 0.5 * (a.v_min + a.v_max) + dy * ah;
  double w = aw * std::exp(std::clamp(dw, -4.0, 4.0));
  double h = ah * std::exp(std::clamp(dh, -4.0, 4.0));
  return Box2D{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h, a.class_id};
}

std::array<double, 4> box_deltas(const Box2D& anchor, const Box2D& gt) {
  double aw = anchor.width(), ah = anchor.height();
  return {(0.5 * (gt.u_min + gt.u_max) - 0.5 * (anchor.u_min + anchor.u_max)) / aw,
          (0.5 * (gt.v_min + gt.v_max) - 0.5 * (anchor.v_min + anchor.v_max)) / ah,
          std::log(gt.width() / aw), std::log(gt.height() / ah)};
}

}  // namespace

Head2dOut head2d_forward(const FeatureMap& fmap, const Head2dParams& params,
                         const std::vector<Box2D>* fixed_proposals) {
  Head2dOut out;
  out.fmap_h = static_cast<int>(fmap.height());
  out.fmap_w = static_cast<int>(fmap.width());
  out.stride = fmap.stride;
  out.rpn_map = add_channel_bias(conv2d(fmap.feats, params.rpn_w, 1, 0), params.rpn_b);

  if (fixed_proposals) {
    out.proposals = *fixed_proposals;
    out.proposal_scores.assign(out.proposals.size(), 1.0);
  } else {
    // decode proposals from values: top-K by objectness
    int64_t h = fmap.height(), w = fmap.width();
    double img_w = static_cast<double>(w * fmap.stride);
    double img_h = static_cast<double>(h * fmap.stride);
    struct Scored {
      double score;
      int64_t idx;
      Box2D box;
    };
    std::vector<Scored> scored;
    const auto& m = out.rpn_map.data();
    int64_t plane = h * w;
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        int64_t cell = y * w + x;
        double obj = sigmoid_value(m[static_cast<size_t>(cell)]);
        Box2D anchor = rpn_anchor(params, fmap.stride, y, x);
        Box2D b = apply_deltas(anchor, m[static_cast<size_t>(plane + cell)],
                               m[static_cast<size_t>(2 * plane + cell)],
                               m[static_cast<size_t>(3 * plane + cell)],
                               m[static_cast<size_t>(4 * plane + cell)]);
        b.u_min = std::clamp(b.u_min, 0.0, img_w);
        b.u_max = std::clamp(b.u_max, 0.0, img_w);
        b.v_min = std::clamp(b.v_min, 0.0, img_h);
        b.v_max = std::clamp(b.v_max, 0.0, img_h);
        if (!(b.u_min < b.u_max && b.v_min < b.v_max)) continue;
        scored.push_back(Scored{obj, cell, b});
      }
    }
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.idx < b.idx;
    });
    size_t k = std::min<size_t>(static_cast<size_t>(params.top_k), scored.size());
    for (size_t i = 0; i < k; ++i) {
      out.proposals.push_back(scored[i].box);
      out.proposal_scores.push_back(scored[i].score);
    }
  }

  // stage 2: pool each proposal and run the shared refinement MLP
  if (!out.proposals.empty()) {
    std::vector<Tensor> rows;
    for (const Box2D& prop : out.proposals) {
      rows.push_back(roi_align_2d(fmap, prop, params.roi_out).flat);
    }
    Tensor pooled = rows.size() == 1 ? rows[0] : concat(rows, 0);
    Tensor hdn = relu(add_row_bias(matmul(pooled, params.rcnn_w1), params.rcnn_b1));
    out.rcnn = add_row_bias(matmul(hdn, params.rcnn_w2), params.rcnn_b2);
  }
  return out;
}

Loss2d loss2d(const Head2dOut& out, std::span<const Box2D> gts, const Head2dParams& params) {
  int64_t h = out.fmap_h, w = out.fmap_w;
  int64_t plane = h * w;
  Loss2d losses;

  // stage 1: objectness + deltas against center-inside assignment
  std::vector<double> obj_targets(static_cast<size_t>(plane), 0.0);
  struct Pos {
    int64_t y, x;
    const Box2D* gt;
  };
  std::vector<Pos> positives;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      Box2D anchor = rpn_anchor(params, out.stride, y, x);
      double cu = 0.5 * (anchor.u_min + anchor.u_max);
      double cv = 0.5 * (anchor.v_min + anchor.v_max);
      for (const Box2D& gt : gts) {
        if (inside_box2d(gt, cu, cv)) {
          obj_targets[static_cast<size_t>(y * w + x)] = 1.0;
          positives.push_back(Pos{y, x, &gt});
          break;
        }
      }
    }
  }
  Tensor obj_logits = reshape(slice(out.rpn_map, 0, 0, 1), {plane});
  losses.rpn_cls = mean(bce_with_logits(obj_logits, Tensor::from_data({plane}, obj_targets)));

  if (positives.empty()) {
    losses.rpn_reg = Tensor::scalar(0.0);
  } else {
    Tensor delta_map = slice(out.rpn_map, 0, 1, 5);  // [4 x h x w]
    std::vector<std::array<int64_t, 2>> cells;
    std::vector<double> targets;
    for (const auto& p : positives) {
      cells.push_back({p.y, p.x});
      auto d = box_deltas(rpn_anchor(params, out.stride, p.y, p.x), *p.gt);
      targets.insert(targets.end(), d.begin(), d.end());
    }
    Tensor preds = gather_cells(delta_map, cells);  // [n x 4]
    Tensor t = Tensor::from_data({static_cast<int64_t>(positives.size()), 4}, targets);
    losses.rpn_reg =
        scale(sum(smooth_l1(preds, t)), 1.0 / static_cast<double>(positives.size()));
  }

  // stage 2: class + deltas per proposal (IoU >= 0.5 positives)
  int C = params.n_classes;
  if (out.proposals.empty()) {
    losses.rcnn_cls = Tensor::scalar(0.0);
    losses.rcnn_reg = Tensor::scalar(0.0);
    return losses;
  }
  int64_t K = static_cast<int64_t>(out.proposals.size());
  std::vector<int64_t> cls_targets(static_cast<size_t>(K), C);  // background
  std::vector<int64_t> pos_rows;
  std::vector<double> reg_targets;
  for (int64_t i = 0; i < K; ++i) {
    const Box2D& prop = out.proposals[static_cast<size_t>(i)];
    double best = 0.5;
    const Box2D* match = nullptr;
    for (const Box2D& gt : gts) {
      double iou = iou_2d(prop, gt);
      if (iou >= best) {
        best = iou;
        match = &gt;
      }
    }
    if (match) {
      cls_targets[static_cast<size_t>(i)] = match->class_id;
      pos_rows.push_back(i);
      auto d = box_deltas(prop, *match);
      reg_targets.insert(reg_targets.end(), d.begin(), d.end());
    }
  }
  Tensor cls_logits = slice(out.rcnn, 1, 0, C + 1);
  losses.rcnn_cls = mean(cross_entropy_rows(cls_logits, cls_targets));
  if (pos_rows.empty()) {
    losses.rcnn_reg = Tensor::scalar(0.0);
  } else {
    std::vector<Tensor> rows;
    for (int64_t r : pos_rows) {
      rows.push_back(slice(slice(out.rcnn, 0, r, r + 1), 1, C + 1, C + 5));
    }
    Tensor preds = rows.size() == 1 ? rows[0] : concat(rows, 0);
    Tensor t = Tensor::from_data({static_cast<int64_t>(pos_rows.size()), 4}, reg_targets);
    losses.rcnn_reg = scale(sum(smooth_l1(preds, t)), 1.0 / static_cast<double>(pos_rows.size()));
  }
  return losses;
}

std::vector<DetectionBox2D> head2d_decode(const Head2dOut& out, const Head2dParams& params,
                                          int image_w, int image_h, double score_thresh,
                                          double nms_iou) {
  std::vector<DetectionBox2D> dets;
  if (!out.rcnn.defined()) return dets;
  int C = params.n_classes;
  int64_t K = static_cast<int64_t>(out.proposals.size());
  for (int64_t i = 0; i < K; ++i) {
    const double* row = out.rcnn.data().data() + i * (C + 1 + 4);
    double mx = row[0];
    for (int c = 1; c <= C; ++c) mx = std::max(mx, row[c]);
    double den = 0.0;
    for (int c = 0; c <= C; ++c) den += std::exp(row[c] - mx);
    int best = 0;
    double best_p = 0.0;
    for (int c = 0; c < C; ++c) {  // skip background
      double pc = std::exp(row[c] - mx) / den;
      if (pc > best_p) {
        best_p = pc;
        best = c;
      }
    }
    if (best_p < score_thresh) continue;
    Box2D b = apply_deltas(out.proposals[static_cast<size_t>(i)], row[C + 1], row[C + 2],
                           row[C + 3], row[C + 4]);
    b.class_id = best;
    b.u_min = std::clamp(b.u_min, 0.0, static_cast<double>(image_w));
    b.u_max = std::clamp(b.u_max, 0.0, static_cast<double>(image_w));
    b.v_min = std::clamp(b.v_min, 0.0, static_cast<double>(image_h));
    b.v_max = std::clamp(b.v_max, 0.0, static_cast<double>(image_h));
    if (!(b.u_min < b.u_max && b.v_min < b.v_max)) continue;
    dets.push_back(DetectionBox2D{b, best_p});
  }
  return nms_2d(std::move(dets), nms_iou);
}

// ---- NMS / AP -------------------------------------------------------------------

namespace {

template <typename DetT, typename IouFn>
std::vector<DetT> greedy_nms(std::vector<DetT> boxes, double iou_thresh, IouFn iou) {
  std::vector<size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (boxes[a].score != boxes[b].score) return boxes[a].score > boxes[b].score;
    return a < b;
  });
  std::vector<DetT> kept;
  for (size_t idx : order) {
    bool suppressed = false;
    for (const DetT& k : kept) {
      if (iou(boxes[idx], k) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(boxes[idx]);
  }
  return kept;
}

}  // namespace

std::vector<DetectionBox3D> nms_3d(std::vector<DetectionBox3D> boxes, double iou_thresh) {
  return greedy_nms(std::move(boxes), iou_thresh, [](const DetectionBox3D& a, const DetectionBox3D& b) {
    return iou_3d(a.box, b.box);
  });
}

std::vector<DetectionBox2D> nms_2d(std::vector<DetectionBox2D> boxes, double iou_thresh) {
  return greedy_nms(std::move(boxes), iou_thresh, [](const DetectionBox2D& a, const DetectionBox2D& b) {
    return iou_2d(a.box, b.box);
  });
}

double average_precision(std::span<const EvalPred3D> preds,
                         const std::vector<std::vector<Box3D>>& gts_per_scene, int class_id,
                         double iou_thresh, bool bev) {
  int64_t n_gt = 0;
  for (const auto& scene : gts_per_scene) {
    for (const Box3D& gt : scene) {
      if (gt.class_id == class_id) ++n_gt;
    }
  }
  std::vector<size_t> order;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].box.class_id == class_id) order.push_back(i);
  }
  if (n_gt == 0) return order.empty() ? 1.0 : 0.0;

  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (preds[a].score != preds[b].score) return preds[a].score > preds[b].score;
    return a < b;
  });
  std::vector<std::vector<bool>> used(gts_per_scene.size());
  for (size_t s = 0; s < gts_per_scene.size(); ++s) used[s].assign(gts_per_scene[s].size(), false);

  std::vector<bool> tp(order.size(), false);
  for (size_t k = 0; k < order.size(); ++k) {
    const EvalPred3D& p = preds[order[k]];
    if (p.scene < 0 || p.scene >= static_cast<int>(gts_per_scene.size())) continue;
    const auto& gts = gts_per_scene[static_cast<size_t>(p.scene)];
    double best = iou_thresh;
    int best_idx = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id != class_id || used[static_cast<size_t>(p.scene)][g]) continue;
      double iou = bev ? iou_bev(p.box, gts[g]) : iou_3d(p.box, gts[g]);
      if (iou >= best && iou > 0.0) {
        best = iou;
        best_idx = static_cast<int>(g);
      }
    }
    if (best_idx >= 0) {
      used[static_cast<size_t>(p.scene)][static_cast<size_t>(best_idx)] = true;
      tp[k] = true;
    }
  }

  // cumulative precision/recall, then 40-point interpolation
  std::vector<double> precision, recall;
  int64_t tps = 0;
  for (size_t k = 0; k < order.size(); ++k) {
    if (tp[k]) ++tps;
    precision.push_back(static_cast<double>(tps) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tps) / static_cast<double>(n_gt));
  }
  double ap = 0.0;
  for (int i = 1; i <= 40; ++i) {
    double r = static_cast<double>(i) / 40.0;
    double p_at = 0.0;
    for (size_t k = 0; k < order.size(); ++k) {
      if (recall[k] >= r) p_at = std::max(p_at, precision[k]);
    }
    ap += p_at;
  }
  return ap / 40.0;
}

}  // namespace vf
