use super::Task;
use crate::error::FormatError;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation Dice for segmentation, accuracy for classification.
    pub val_metric: f64,
    pub lr: f64,
    /// Wall-clock duration of the epoch. The only non-reproducible column.
    pub seconds: f64,
}

/// Per-epoch training log; records can only be appended.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    task: Task,
    records: Vec<EpochRecord>,
}

impl History {
    pub fn new(task: Task) -> Self {
        History {
            task,
            records: Vec::new(),
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Panics unless `r.epoch` continues the sequence.
    pub fn push(&mut self, r: EpochRecord) {
        assert_eq!(r.epoch, self.records.len() + 1, "history epochs must be consecutive");
        self.records.push(r);
    }

    pub fn metric_name(task: Task) -> &'static str {
        match task {
            Task::Segmentation => "val_dice",
            Task::Classification => "val_accuracy",
        }
    }

    fn header(task: Task) -> String {
        format!("epoch,train_loss,val_loss,{},lr,seconds", Self::metric_name(task))
    }

    /// Floats use the shortest representation that parses back to the same
    /// value, so [`History::from_csv`] restores the history exactly.
    pub fn to_csv(&self) -> String {
        let mut out = Self::header(self.task);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_metric, r.lr, r.seconds
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, FormatError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let task = [Task::Segmentation, Task::Classification]
            .into_iter()
            .find(|&t| header == Self::header(t))
            .ok_or_else(|| FormatError::Text {
                line: 1,
                message: format!("unexpected history header `{header}`"),
            })?;
        let mut history = History::new(task);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let err = |message: String| FormatError::Text { line: line_no, message };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            }
            let num = |j: usize| fields[j].parse::<f64>().map_err(|_| err(format!("bad number `{}`", fields[j])));
            let epoch: usize = fields[0].parse().map_err(|_| err(format!("bad epoch `{}`", fields[0])))?;
            if epoch != history.len() + 1 {
                return Err(err(format!("epoch {epoch} out of sequence")));
            }
            history.push(EpochRecord {
                epoch,
                train_loss: num(1)?,
                val_loss: num(2)?,
                val_metric: num(3)?,
                lr: num(4)?,
                seconds: num(5)?,
            });
        }
        Ok(history)
    }
}
