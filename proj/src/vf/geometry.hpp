#pragma once

#include <array>
#include <cstdint>

#include "vf/error.hpp"

namespace vf {

// 3x4 matrix taking homogeneous 3D points (meters, sensor frame) to
// homogeneous pixel coordinates; third output row is depth.
struct CameraProjection {
  std::array<double, 12> m;  // row-major

  // Pinhole with the world frame x forward / y left / z up and the camera at
  // the origin looking along +x. Depth equals forward distance.
  static CameraProjection pinhole(double focal, double cu, double cv);
};

struct Box3D {
  double x = 0, y = 0, z = 0;  // center, meters
  double l = 0, w = 0, h = 0;  // extents along x, y, z
  double yaw = 0;              // radians in [-pi, pi)
  int class_id = 0;
};

struct Box2D {
  double u_min = 0, v_min = 0, u_max = 0, v_max = 0;  // pixels
  int class_id = 0;

  double width() const { return u_max - u_min; }
  double height() const { return v_max - v_min; }
  double area() const { return width() * height(); }
};

struct PixelPoint {
  double u = 0, v = 0;
  double depth = 0;
};

inline constexpr double kMinDepth = 1e-6;

// Dehomogenized m * [x y z 1]^T; depth <= kMinDepth is a behind-camera error.
PixelPoint project_point(const CameraProjection& proj, double x, double y, double z);

std::array<std::array<double, 3>, 8> box3d_corners(const Box3D& b);

// Axis-aligned hull of the projected corners, clipped to [0,W] x [0,H].
// Corners behind the camera are excluded from the hull.
Box2D project_box3d(const CameraProjection& proj, const Box3D& b, int image_w, int image_h);

double iou_2d(const Box2D& a, const Box2D& b);
// Requires yaw == 0 on both boxes.
double iou_3d(const Box3D& a, const Box3D& b);
// IoU of the boxes' footprints on the ground plane (x, y extents).
double iou_bev(const Box3D& a, const Box3D& b);

double normalize_yaw(double yaw);

}  // namespace vf
