import os
import base64
from io import BytesIO

import numpy as np
import pandas as pd
# add explicit Agg backend to avoid display backend errors on headless systems
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
from jinja2 import Template

from vn_errors import FormatError, IoError
from vn_helpers import atomic_write_text


COLLAPSE_KL_FLOOR = 0.01   # nats; mean KL above this means the posterior is still in use
METRIC_COLUMNS = ['step', 'elbo', 'recon_ll', 'flow_logdet', 'kl', 'bits_per_dim']


class TrainingReport:
    """
    Reads a training metrics log, computes the summary numbers and renders a self-contained
    HTML report with the curves embedded as base64 PNGs.

    An optional control log (e.g. the same run without KL warmup) is summarized alongside for
    the posterior-collapse probe.
    """

    def __init__(self, metrics_path, control_path=None):
        self.metrics_path = metrics_path
        self.control_path = control_path
        self.frame = self._load(metrics_path)
        self.control = self._load(control_path) if control_path else None
        self.results = {}

    def _load(self, path):
        if not os.path.exists(path):
            print(f"❌ Metrics log not found: {path}")
            raise IoError(f"metrics log not found: {path}")
        try:
            frame = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise FormatError(f"'{path}' is not a metrics log: {e}") from e
        missing = [c for c in METRIC_COLUMNS if c not in frame.columns]
        if missing:
            raise FormatError(f"'{path}' lacks columns {missing}")
        print(f"📂 Loaded {len(frame)} steps from '{path}'")
        return frame

    @staticmethod
    def _summarize(frame):
        if frame.empty:
            return {'steps': 0}
        tail = max(1, int(np.ceil(0.1 * len(frame))))
        best = frame.loc[frame['bits_per_dim'].idxmin()]
        mean_kl = float(frame['kl'].tail(tail).mean())
        return {
            'steps': int(len(frame)),
            'last_step': int(frame['step'].iloc[-1]),
            'final_bits_per_dim': float(frame['bits_per_dim'].iloc[-1]),
            'best_bits_per_dim': float(best['bits_per_dim']),
            'best_step': int(best['step']),
            'final_elbo': float(frame['elbo'].iloc[-1]),
            'mean_kl_tail': mean_kl,
            'collapse_probe': 'pass' if mean_kl > COLLAPSE_KL_FLOOR else 'warn',
        }

    def evaluate(self):
        """Summary of the run (and of the control, if given)."""
        print("\n🔍 Summarizing training run...")
        self.results = {'run': self._summarize(self.frame)}
        if self.control is not None:
            self.results['control'] = self._summarize(self.control)
        if self.results['run']['steps'] == 0:
            print("⚠️ Metrics log has no steps yet.")
        else:
            verdict = self.results['run']['collapse_probe']
            print(f"{'✅' if verdict == 'pass' else '⚠️'} Collapse probe: mean KL over the last 10% of steps = "
                  f"{self.results['run']['mean_kl_tail']:.4f} nats ({verdict})")
        return self.results

    # ========== PLOTS ==========

    def _generate_plots_base64(self):
        primary_color = '#8B5CF6'
        accent_color = '#10B981'
        dark_color = '#4C1D95'

        fig, axes = plt.subplots(2, 2, figsize=(14, 9))
        panels = [
            ('bits_per_dim', 'Bits / dim', axes[0, 0]),
            ('kl', 'KL(q(z|x) || p(z)) [nats]', axes[0, 1]),
            ('recon_ll', 'log p(y|z) [nats]', axes[1, 0]),
            ('flow_logdet', 'Flow log-det [nats]', axes[1, 1]),
        ]
        for column, title, ax in panels:
            ax.plot(self.frame['step'], self.frame[column], color=primary_color, linewidth=1.2, label='run')
            if self.control is not None:
                ax.plot(self.control['step'], self.control[column], color=accent_color, linewidth=1.0,
                        alpha=0.8, label='control')
                ax.legend(fontsize=9)
            ax.set_title(title, fontsize=12, fontweight='bold', color=dark_color)
            ax.set_xlabel('step')
            ax.grid(alpha=0.25, linestyle='--', color='#94A3B8')
            ax.set_facecolor('#FAFAFA')
        plt.tight_layout()

        buf = BytesIO()
        plt.savefig(buf, format='png', dpi=100)
        plt.close(fig)
        return base64.b64encode(buf.getvalue()).decode('utf-8')

    # ========== REPORT GENERATION ==========

    def generate_report(self, output_file='training_report.html'):
        """Orchestrates the creation of the HTML report."""
        if not self.results:
            self.evaluate()
        if self.results['run']['steps'] == 0:
            print("❌ Cannot generate report: the metrics log is empty.")
            return None

        print("📊 Generating curves and HTML report...")
        control = self.results.get('control')
        html = _TEMPLATE.render(
            metrics_path=os.path.basename(self.metrics_path),
            run=self.results['run'],
            control=control if control and control['steps'] else None,
            plot=self._generate_plots_base64(),
        )
        atomic_write_text(output_file, html)
        print(f"✓ Report saved to: {output_file}")
        return output_file


_TEMPLATE = Template("""<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="UTF-8">
<title>Training report: {{ metrics_path }}</title>
<style>
  body { font-family: 'Inter', -apple-system, 'Segoe UI', Roboto, sans-serif; background: #F3F4F6; color: #1F2937; padding: 40px 20px; }
  .container { max-width: 1200px; margin: 0 auto; background: #fff; border-radius: 20px; overflow: hidden;
               box-shadow: 0 20px 60px rgba(76, 29, 149, 0.15); }
  .header { background: linear-gradient(135deg, #4C1D95 0%, #8B5CF6 100%); color: white; padding: 40px; text-align: center; }
  .content { padding: 40px; }
  table { border-collapse: collapse; margin-bottom: 30px; }
  td, th { padding: 6px 18px; border-bottom: 1px solid #E5E7EB; text-align: left; }
  .pass { color: #10B981; font-weight: 600; }
  .warn { color: #D97706; font-weight: 600; }
  img { width: 100%; }
</style>
</head>
<body>
<div class="container">
  <div class="header"><h1>Training report</h1><p>{{ metrics_path }}: {{ run.steps }} steps</p></div>
  <div class="content">
    <table>
      <tr><th></th><th>run</th>{% if control %}<th>control</th>{% endif %}</tr>
      <tr><td>final bits/dim</td><td>{{ '%.4f' % run.final_bits_per_dim }}</td>{% if control %}<td>{{ '%.4f' % control.final_bits_per_dim }}</td>{% endif %}</tr>
      <tr><td>best bits/dim (step)</td><td>{{ '%.4f' % run.best_bits_per_dim }} ({{ run.best_step }})</td>{% if control %}<td>{{ '%.4f' % control.best_bits_per_dim }} ({{ control.best_step }})</td>{% endif %}</tr>
      <tr><td>mean KL, last 10% [nats]</td><td>{{ '%.4f' % run.mean_kl_tail }}</td>{% if control %}<td>{{ '%.4f' % control.mean_kl_tail }}</td>{% endif %}</tr>
      <tr><td>collapse probe</td><td class="{{ run.collapse_probe }}">{{ run.collapse_probe }}</td>{% if control %}<td class="{{ control.collapse_probe }}">{{ control.collapse_probe }}</td>{% endif %}</tr>
    </table>
    <img src="data:image/png;base64,{{ plot }}" alt="training curves">
  </div>
</div>
</body>
</html>
""")


# ========== MAIN EXECUTION ==========

if __name__ == "__main__":
    report = TrainingReport(os.path.join('..', 'vapnev_out', 'metrics.csv'))
    report.evaluate()
    report.generate_report(os.path.join('..', 'vapnev_out', 'training_report.html'))
