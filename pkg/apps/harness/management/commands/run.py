from apps.harness.management.base import LabCommand
from apps.harness.services.experiment_service import experiment_service


class Command(LabCommand):
    help = "Runs every configured learner mode over all seeds and writes summary files."

    def run(self, **options):
        config = self.load(options["config"], options["overrides"])
        summary = experiment_service.run_experiment(config)

        for row in summary.rows:
            self.stdout.write(
                f"{row['mode']:>14}  overall_acc={row['overall_acc_mean']:.4f}"
                f"  precision={row['precision_mean']:.4f}  recall={row['recall_mean']:.4f}"
            )
        self.stdout.write(
            self.style.SUCCESS(f"Summary written to {config.output_dir / 'summary.csv'}")
        )
