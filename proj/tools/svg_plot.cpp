#include "svg_plot.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace esi::cli {

namespace {

constexpr double kPanelW = 420, kPanelH = 320;
constexpr double kLeft = 64, kRight = 20, kTop = 40, kBottom = 56;

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// Rounds the data range out to a step of 1, 2 or 5 times a power of ten.
void nice_range(double& lo, double& hi, double& step) {
  if (!(hi > lo)) {
    const double pad = lo == 0.0 ? 1.0 : std::abs(lo) * 0.1;
    lo -= pad;
    hi += pad;
  }
  const double raw = (hi - lo) / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double r = raw / mag;
  step = (r <= 1 ? 1 : r <= 2 ? 2 : r <= 5 ? 5 : 10) * mag;
  lo = std::floor(lo / step) * step;
  hi = std::ceil(hi / step) * step;
}

void panel(std::ostringstream& os, const Series& s, double ox) {
  const double pw = kPanelW - kLeft - kRight, ph = kPanelH - kTop - kBottom;
  std::vector<double> ys;
  for (double v : s.y)
    if (std::isfinite(v)) ys.push_back(v);
  if (s.reference) ys.push_back(*s.reference);
  double ylo = ys.empty() ? 0.0 : *std::min_element(ys.begin(), ys.end());
  double yhi = ys.empty() ? 1.0 : *std::max_element(ys.begin(), ys.end());
  if (s.bars) ylo = std::min(ylo, 0.0);
  double ystep = 0.1;
  nice_range(ylo, yhi, ystep);
  double xlo = s.x.empty() ? 0.0 : *std::min_element(s.x.begin(), s.x.end());
  double xhi = s.x.empty() ? 1.0 : *std::max_element(s.x.begin(), s.x.end());
  const double xpad = s.bars || s.x.size() < 2 ? 0.5 : (xhi - xlo) * 0.05;
  xlo -= xpad;
  xhi += xpad;
  auto px = [&](double x) { return ox + kLeft + (x - xlo) / (xhi - xlo) * pw; };
  auto py = [&](double y) { return kTop + (1.0 - (y - ylo) / (yhi - ylo)) * ph; };

  os << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << ox + kPanelW / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">"
     << escape(s.title) << "</text>\n";
  os << "<rect x=\"" << ox + kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\""
     << ph << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (double y = ylo; y <= yhi + ystep * 1e-6; y += ystep) {
    os << "<line x1=\"" << ox + kLeft << "\" x2=\"" << ox + kLeft + pw << "\" y1=\"" << py(y)
       << "\" y2=\"" << py(y) << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << ox + kLeft - 6 << "\" y=\"" << py(y) + 4
       << "\" text-anchor=\"end\">" << num(y) << "</text>\n";
  }
  for (size_t i = 0; i < s.x.size(); ++i) {
    const std::string label = i < s.x_ticks.size() ? s.x_ticks[i] : num(s.x[i]);
    os << "<text x=\"" << px(s.x[i]) << "\" y=\"" << kTop + ph + 16
       << "\" text-anchor=\"middle\">" << escape(label) << "</text>\n";
  }
  os << "<text x=\"" << ox + kLeft + pw / 2 << "\" y=\"" << kPanelH - 14
     << "\" text-anchor=\"middle\">" << escape(s.x_label) << "</text>\n";
  os << "<text transform=\"translate(" << ox + 16 << "," << kTop + ph / 2
     << ") rotate(-90)\" text-anchor=\"middle\">" << escape(s.y_label) << "</text>\n";

  if (s.bars) {
    const double w = pw / (xhi - xlo) * 0.6;
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      const double top = py(std::max(s.y[i], 0.0)), base = py(std::max(ylo, 0.0));
      os << "<rect x=\"" << px(s.x[i]) - w / 2 << "\" y=\"" << top << "\" width=\"" << w
         << "\" height=\"" << std::max(base - top, 0.0) << "\" fill=\"#3a6ea5\"/>\n";
    }
  } else {
    std::ostringstream pts;
    for (size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) pts << px(s.x[i]) << "," << py(s.y[i]) << " ";
    os << "<polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\"#3a6ea5\" stroke-width=\"2\"/>\n";
    for (size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i]))
        os << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i])
           << "\" r=\"3.5\" fill=\"#3a6ea5\"/>\n";
  }
  if (s.reference) {
    const double y = py(*s.reference);
    os << "<line x1=\"" << ox + kLeft << "\" x2=\"" << ox + kLeft + pw << "\" y1=\"" << y
       << "\" y2=\"" << y << "\" stroke=\"#c33\" stroke-dasharray=\"6,4\"/>\n";
    os << "<line x1=\"" << ox + kLeft + pw - 110 << "\" x2=\"" << ox + kLeft + pw - 86
       << "\" y1=\"" << kTop - 8 << "\" y2=\"" << kTop - 8
       << "\" stroke=\"#c33\" stroke-dasharray=\"6,4\"/>\n";
    os << "<text x=\"" << ox + kLeft + pw - 80 << "\" y=\"" << kTop - 4 << "\" fill=\"#c33\">"
       << escape(s.reference_label) << "</text>\n";
  }
  os << "</g>\n";
}

}  // namespace

std::string render_svg(const std::vector<Series>& panels) {
  std::ostringstream os;
  const double width = kPanelW * static_cast<double>(std::max<size_t>(panels.size(), 1));
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << kPanelH
     << "\" viewBox=\"0 0 " << width << " " << kPanelH << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (size_t i = 0; i < panels.size(); ++i) panel(os, panels[i], kPanelW * static_cast<double>(i));
  os << "</svg>\n";
  return os.str();
}

std::vector<Series> ablation_series(const downstream::AblationTable& table) {
  using downstream::AblationKind;
  std::vector<const downstream::AblationRow*> ok;
  for (const auto& r : table.rows)
    if (r.status == "ok") ok.push_back(&r);
  std::vector<Series> out;
  if (table.kind == AblationKind::misalignment) {
    Series s;
    s.title = "Probe AUC vs misalignment";
    s.x_label = "misaligned fraction";
    s.y_label = "macro AUC";
    for (const auto* r : ok) {
      s.x.push_back(r->value);
      s.y.push_back(r->probe_auc);
      s.x_ticks.push_back(r->point);
    }
    if (table.random_baseline) {
      s.reference = table.random_baseline->probe_auc;
      s.reference_label = "random init";
    }
    out.push_back(s);
  } else if (table.kind == AblationKind::datasize) {
    Series auc, dist;
    auc.title = "Probe AUC vs pretraining size";
    dist.title = "Embedding MMD vs pretraining size";
    auc.x_label = dist.x_label = "pretraining pairs";
    auc.y_label = "macro AUC";
    dist.y_label = "MMD";
    for (size_t i = 0; i < ok.size(); ++i) {
      const std::string tick = ok[i]->value >= 1000 && std::fmod(ok[i]->value, 1000.0) == 0.0
                                   ? num(ok[i]->value / 1000.0) + "k"
                                   : ok[i]->point;
      for (Series* s : {&auc, &dist}) {
        s->x.push_back(static_cast<double>(i));
        s->x_ticks.push_back(tick);
      }
      auc.y.push_back(ok[i]->probe_auc);
      dist.y.push_back(ok[i]->mmd);
    }
    out.push_back(auc);
    out.push_back(dist);
  } else {
    Series s;
    s.title = "Probe AUC by loss component";
    s.x_label = "variant";
    s.y_label = "macro AUC";
    s.bars = true;
    for (size_t i = 0; i < ok.size(); ++i) {
      s.x.push_back(static_cast<double>(i));
      s.y.push_back(ok[i]->probe_auc);
      s.x_ticks.push_back(ok[i]->point);
    }
    if (table.random_baseline) {
      s.reference = table.random_baseline->probe_auc;
      s.reference_label = "random init";
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace esi::cli
