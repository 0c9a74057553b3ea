import init, { sample, frontier_svg, mask_svg } from "./pkg/trajlab_web.js";

const $ = (id) => document.getElementById(id);

function show(target, fn) {
  try {
    target.classList.remove("err");
    fn();
  } catch (e) {
    target.classList.add("err");
    target.textContent = String(e.message ?? e);
  }
}

function runSample() {
  show($("sample-stats"), () => {
    const view = JSON.parse(
      sample($("strategy").value, $("params").value, Number($("n").value), Number($("seed").value)),
    );
    $("sample-stats").textContent =
      `fidelity ${view.fidelity_mean.toFixed(3)}, context ${view.context_mean.toFixed(3)}, ` +
      `${view.calls_per_sample} denoiser calls per sample`;
    $("sample-plot").innerHTML = view.svg;
  });
}

function runFront() {
  show($("front-plot"), () => {
    $("front-plot").innerHTML = frontier_svg(Number($("front-n").value), 0);
  });
}

function runMask() {
  $("q-value").textContent = $("q").value;
  $("index-value").textContent = $("index").value;
  show($("mask-plot"), () => {
    $("mask-plot").innerHTML = mask_svg(Number($("q").value), Number($("index").value), 0);
  });
}

await init();
$("run-sample").addEventListener("click", runSample);
$("run-front").addEventListener("click", runFront);
$("q").addEventListener("input", runMask);
$("index").addEventListener("input", runMask);
runSample();
runMask();
