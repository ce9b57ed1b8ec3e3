#include "ior/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <stdexcept>

namespace ior {

namespace {

cv::Mat to_bgr(const ImagePlane& image, double scale) {
  if (image.dim() != 3 || image.size(0) != 3)
    throw std::invalid_argument("image io: expected a [3,H,W] tensor");
  auto hwc = (image.detach().to(torch::kCPU, torch::kFloat32).clamp(0, 1) * scale)
                 .permute({1, 2, 0})
                 .contiguous();
  cv::Mat rgb(static_cast<int>(image.size(1)), static_cast<int>(image.size(2)), CV_32FC3,
              hwc.data_ptr<float>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

ImagePlane from_bgr(const cv::Mat& bgr, double scale) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::Mat f;
  rgb.convertTo(f, CV_32FC3, 1.0 / scale);
  auto t = torch::from_blob(f.data, {f.rows, f.cols, 3}, torch::kFloat32).clone();
  return t.permute({2, 0, 1}).contiguous();
}

}  // namespace

void save_png8(const std::string& path, const ImagePlane& image) {
  cv::Mat out;
  to_bgr(image, 255.0).convertTo(out, CV_8UC3);
  if (!cv::imwrite(path, out)) throw std::runtime_error("cannot write " + path);
}

ImagePlane load_png8(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  if (m.empty()) throw std::runtime_error("cannot read " + path);
  return from_bgr(m, 255.0);
}

void save_png16(const std::string& path, const ImagePlane& image) {
  cv::Mat out;
  to_bgr(image, 65535.0).convertTo(out, CV_16UC3);
  if (!cv::imwrite(path, out)) throw std::runtime_error("cannot write " + path);
}

ImagePlane load_png16(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw std::runtime_error("cannot read " + path);
  if (m.type() != CV_16UC3) throw std::runtime_error(path + " is not a 16-bit RGB image");
  return from_bgr(m, 65535.0);
}

}  // namespace ior
