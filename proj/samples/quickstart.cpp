// Builds the attention-fused U-Net, runs one synthetic drawing through it and
// takes a few optimizer steps on that single sample.

#include <cstdio>

#include "segnet/training.hpp"

int main() {
  using namespace segnet;
  const Sample s = generate_sample(32, 7, 0);
  SegModel<float> model = build_model<float>(ModelVariant::parse("unet-full"), EncoderConfig{}, kNumClasses, 1);
  std::printf("%s: %zu parameters\n", model.variant.id().c_str(), count_params(model));

  Tensor<float> x(Shape{1, 1, s.height, s.width});
  for (std::size_t i = 0; i < s.image.size(); ++i) x.data()[i] = s.image[i] / 255.0f;
  const LabelBatch y{1, s.height, s.width, s.mask};

  AdamState<float> adam;
  for (int step = 0; step < 5; ++step) {
    for (auto& p : model.params()) p.tensor.zero_grad();
    Tensor<float> l = loss(LossKind{}, forward(model, x), y);
    const float value = l.item();
    backward(l);
    adam_step(model.params(), adam, 1e-3);
    std::printf("step %d  focal loss %.5f\n", step, value);
  }
  const auto pred = predict_mask(model, s);
  const MetricsReport r = make_report(std::vector<ConfusionMatrix>{confusion(pred, s.mask, kNumClasses)});
  std::printf("pixel accuracy %.4f\n", r.accuracy);
}
