"""
Evaluation report rendering: ROC and score histogram images, and a PDF summary
"""
import logging
from io import BytesIO
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
from reportlab.graphics.charts.lineplots import LinePlot
from reportlab.graphics.shapes import Drawing, String
from reportlab.lib.colors import HexColor
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from .metrics import MetricsReport

logger = logging.getLogger(__name__)

ROC_IMAGE = 'roc.png'
HISTOGRAM_IMAGE = 'scores_hist.png'
REPORT_PDF = 'report.pdf'

NORMAL_COLOR = '#3498DB'
ANOMALY_COLOR = '#E74C3C'
AXIS_COLOR = '#2C3E50'


FIGURE_SIZE = (6.4, 4.8)
FIGURE_DPI = 100


def _save(figure, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(path, format='png', dpi=FIGURE_DPI)
    plt.close(figure)
    return path


def render_roc_png(fpr, tpr, path, auc_value=None):
    figure, axis = plt.subplots(figsize=FIGURE_SIZE)
    label = 'detector' if auc_value is None else f"detector (AUC = {auc_value:.4f})"
    axis.plot(fpr, tpr, color=ANOMALY_COLOR, linewidth=2, label=label)
    axis.plot([0, 1], [0, 1], color='#BDC3C7', linestyle='--', linewidth=1)
    axis.set_xlim(0.0, 1.0)
    axis.set_ylim(0.0, 1.0)
    axis.set_xlabel('false positive rate')
    axis.set_ylabel('detection rate')
    axis.set_title('ROC curve')
    axis.legend(loc='lower right')
    return _save(figure, path)


def render_histogram_png(scores, labels, path, bins=20):
    """Per-class score densities over [0, 1]"""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    figure, axis = plt.subplots(figsize=FIGURE_SIZE)
    for selected, color, name in ((labels == 0, NORMAL_COLOR, 'normal'), (labels == 1, ANOMALY_COLOR, 'anomalous')):
        if selected.any():
            axis.hist(scores[selected], bins=bins, range=(0.0, 1.0), density=True, alpha=0.6, color=color, label=name)
    axis.set_xlabel('fused score')
    axis.set_ylabel('density')
    axis.set_title('Score histogram')
    axis.legend(loc='upper center')
    return _save(figure, path)


class EvaluationReportGenerator:
    """PDF summary of one evaluation: metrics table and ROC chart"""

    def __init__(self):
        self.page_width, self.page_height = A4
        self.margin = 0.75 * inch

    def generate_report_pdf(self, report: MetricsReport, fpr, tpr, title='Detection report'):
        buffer = BytesIO()
        doc = SimpleDocTemplate(
            buffer,
            pagesize=A4,
            rightMargin=self.margin,
            leftMargin=self.margin,
            topMargin=self.margin,
            bottomMargin=self.margin,
        )
        styles = getSampleStyleSheet()
        title_style = ParagraphStyle(
            'ReportTitle',
            parent=styles['Heading1'],
            fontSize=22,
            spaceAfter=20,
            alignment=TA_CENTER,
            textColor=HexColor(AXIS_COLOR),
        )

        story = [Paragraph(title, title_style), Spacer(1, 0.2 * inch)]
        story.append(self._metrics_table(report))
        story.append(Spacer(1, 0.3 * inch))
        story.append(self._roc_chart(fpr, tpr))

        doc.build(story)
        pdf_content = buffer.getvalue()
        buffer.close()
        return pdf_content

    def _metrics_table(self, report: MetricsReport):
        rows = [
            ['Metric', 'Value'],
            ['Behavior AUC', f"{report.auc:.4f}"],
            ['Detection rate', f"{report.dr:.4f}"],
            ['False positive rate', f"{report.fpr:.4f}"],
            ['Threshold', f"{report.threshold:.4f} ({report.threshold_source})"],
            ['TP / FP / TN / FN', f"{report.tp} / {report.fp} / {report.tn} / {report.fn}"],
        ]
        rows += [[f"DR @ {budget}", f"{value:.4f}"] for budget, value in report.dr_at_budget.items()]
        if report.sequence_auc is not None:
            rows.append(['Sequence AUC', f"{report.sequence_auc:.4f}"])
        if report.mean_distance_normal is not None:
            rows.append(['Mean nearest-center distance (normal)', f"{report.mean_distance_normal:.4f}"])
            rows.append(['Mean nearest-center distance (anomalous)', f"{report.mean_distance_anomalous:.4f}"])
        table = Table(rows, colWidths=[3.5 * inch, 2.5 * inch])
        table.setStyle(TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), HexColor(NORMAL_COLOR)),
            ('TEXTCOLOR', (0, 0), (-1, 0), HexColor('#FFFFFF')),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('GRID', (0, 0), (-1, -1), 0.5, HexColor('#BDC3C7')),
        ]))
        return table

    def _roc_chart(self, fpr, tpr):
        drawing = Drawing(400, 300)
        plot = LinePlot()
        plot.x, plot.y, plot.width, plot.height = 50, 40, 320, 230
        plot.data = [list(zip(map(float, fpr), map(float, tpr))), [(0.0, 0.0), (1.0, 1.0)]]
        plot.xValueAxis.valueMin = plot.yValueAxis.valueMin = 0.0
        plot.xValueAxis.valueMax = plot.yValueAxis.valueMax = 1.0
        plot.lines[0].strokeColor = HexColor(ANOMALY_COLOR)
        plot.lines[1].strokeColor = HexColor('#BDC3C7')
        drawing.add(plot)
        drawing.add(String(150, 5, 'false positive rate vs detection rate', fontSize=9))
        return drawing


def render_reports(report: MetricsReport, fpr, tpr, scores, labels, output_dir):
    """Write the ROC image, the score histogram and the PDF summary; returns their paths"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        'roc': render_roc_png(fpr, tpr, output_dir / ROC_IMAGE, report.auc),
        'histogram': render_histogram_png(scores, labels, output_dir / HISTOGRAM_IMAGE),
    }
    pdf_path = output_dir / REPORT_PDF
    pdf_path.write_bytes(EvaluationReportGenerator().generate_report_pdf(report, fpr, tpr))
    paths['pdf'] = pdf_path
    logger.info(f"Report images and PDF written to {output_dir}")
    return paths
