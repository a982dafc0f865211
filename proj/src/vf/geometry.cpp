#include "vf/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace vf {

CameraProjection CameraProjection::pinhole(double focal, double cu, double cv) {
  // K [f 0 cu; 0 f cv; 0 0 1] composed with the world->camera rotation
  // (cam right = -y_world, cam down = -z_world, cam forward = +x_world).
  return CameraProjection{{cu, -focal, 0, 0,  //
                           cv, 0, -focal, 0,  //
                           1, 0, 0, 0}};
}

PixelPoint project_point(const CameraProjection& proj, double x, double y, double z) {
  const auto& m = proj.m;
  double hu = m[0] * x + m[1] * y + m[2] * z + m[3];
  double hv = m[4] * x + m[5] * y + m[6] * z + m[7];
  double hw = m[8] * x + m[9] * y + m[10] * z + m[11];
  if (hw <= kMinDepth) {
    fail(ErrorCode::behind_camera, "project_point: depth " + std::to_string(hw) +
                                       " behind camera plane");
  }
  return PixelPoint{hu / hw, hv / hw, hw};
}

std::array<std::array<double, 3>, 8> box3d_corners(const Box3D& b) {
  double c = std::cos(b.yaw), s = std::sin(b.yaw);
  std::array<std::array<double, 3>, 8> out;
  int idx = 0;
  for (int dx : {-1, 1}) {
    for (int dy : {-1, 1}) {
      for (int dz : {-1, 1}) {
        double lx = 0.5 * b.l * dx;
        double ly = 0.5 * b.w * dy;
        double lz = 0.5 * b.h * dz;
        out[static_cast<size_t>(idx++)] = {b.x + c * lx - s * ly, b.y + s * lx + c * ly, b.z + lz};
      }
    }
  }
  return out;
}

Box2D project_box3d(const CameraProjection& proj, const Box3D& b, int image_w, int image_h) {
  auto corners = box3d_corners(b);
  double u0 = 0, v0 = 0, u1 = 0, v1 = 0;
  bool any = false;
  for (const auto& c : corners) {
    PixelPoint p;
    try {
      p = project_point(proj, c[0], c[1], c[2]);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::behind_camera) continue;
      throw;
    }
    if (!any) {
      u0 = u1 = p.u;
      v0 = v1 = p.v;
      any = true;
    } else {
      u0 = std::min(u0, p.u);
      u1 = std::max(u1, p.u);
      v0 = std::min(v0, p.v);
      v1 = std::max(v1, p.v);
    }
  }
  if (!any) {
    fail(ErrorCode::behind_camera, "project_box3d: all corners behind camera");
  }
  Box2D out;
  out.u_min = std::clamp(u0, 0.0, static_cast<double>(image_w));
  out.u_max = std::clamp(u1, 0.0, static_cast<double>(image_w));
  out.v_min = std::clamp(v0, 0.0, static_cast<double>(image_h));
  out.v_max = std::clamp(v1, 0.0, static_cast<double>(image_h));
  out.class_id = b.class_id;
  if (!(out.u_min < out.u_max && out.v_min < out.v_max)) {
    fail(ErrorCode::degenerate_box, "project_box3d: box projects outside the image");
  }
  return out;
}

double iou_2d(const Box2D& a, const Box2D& b) {
  double iw = std::min(a.u_max, b.u_max) - std::max(a.u_min, b.u_min);
  double ih = std::min(a.v_max, b.v_max) - std::max(a.v_min, b.v_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  double inter = iw * ih;
  double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace {

double overlap_1d(double ca, double ea, double cb, double eb) {
  return std::min(ca + 0.5 * ea, cb + 0.5 * eb) - std::max(ca - 0.5 * ea, cb - 0.5 * eb);
}

void require_axis_aligned(const Box3D& b, const char* op) {
  if (b.yaw != 0.0) {
    fail(ErrorCode::unsupported_rotation,
         std::string(op) + ": rotated boxes unsupported (yaw = " + std::to_string(b.yaw) + ")");
  }
}

}  // namespace

double iou_3d(const Box3D& a, const Box3D& b) {
  require_axis_aligned(a, "iou_3d");
  require_axis_aligned(b, "iou_3d");
  double ox = overlap_1d(a.x, a.l, b.x, b.l);
  double oy = overlap_1d(a.y, a.w, b.y, b.w);
  double oz = overlap_1d(a.z, a.h, b.z, b.h);
  if (ox <= 0 || oy <= 0 || oz <= 0) return 0.0;
  double inter = ox * oy * oz;
  double uni = a.l * a.w * a.h + b.l * b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double iou_bev(const Box3D& a, const Box3D& b) {
  require_axis_aligned(a, "iou_bev");
  require_axis_aligned(b, "iou_bev");
  double ox = overlap_1d(a.x, a.l, b.x, b.l);
  double oy = overlap_1d(a.y, a.w, b.y, b.w);
  if (ox <= 0 || oy <= 0) return 0.0;
  double inter = ox * oy;
  double uni = a.l * a.w + b.l * b.w - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double normalize_yaw(double yaw) {
  constexpr double kPi = 3.14159265358979323846;
  double y = std::fmod(yaw + kPi, 2.0 * kPi);
  if (y < 0) y += 2.0 * kPi;
  return y - kPi;
}

}  // namespace vf
